from scripts.exceptions import *
from scripts.image_core import *
from scripts.data_loader import *
from scripts.plot import *
from scripts.blur_sim import *
from scripts.filter_bank import *
from scripts.wiener_core import *
from scripts.refine import *
from scripts.train import *
from scripts.evaluation import *

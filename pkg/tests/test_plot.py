import numpy as np
import pandas as pd

from scripts.plot import AblationPlotter, TrainingPlotter


def test_loss_curve(tmp_path):
    log = tmp_path / 'log.csv'
    pd.DataFrame({'iteration': [5, 10, 15], 'lr': [1e-3] * 3, 'train_loss': [0.3, 0.2, 0.15],
                  'val_psnr': [np.nan, 24.0, 25.1]}).to_csv(log, index=False)
    out = tmp_path / 'loss.png'
    assert TrainingPlotter(str(log)).plot_loss_curve(str(out)) == str(out)
    assert out.stat().st_size > 0


def test_ablation_chart_from_csv(tmp_path):
    table = tmp_path / 'ablation.csv'
    pd.DataFrame({'arm': ['a', 'b', 'c'], 'bank': ['intensity', 'intensity', 'gradient'],
                  'wiener': [True, False, True], 'levels': [2, 2, 1], 'psnr': [25.0, 23.5, 24.0],
                  'ssim': [0.8, 0.7, 0.75]}).to_csv(table, index=False)
    out = tmp_path / 'arms.png'
    AblationPlotter(str(table)).plot_arms(str(out))
    assert out.exists()

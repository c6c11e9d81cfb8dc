import pandas as pd
import matplotlib.pyplot as plt
import seaborn as sns

# Set a clean visual style for all plots
sns.set(style='whitegrid')


def _finish(path):
    """Save to `path` when given, otherwise show the figure."""
    plt.tight_layout()
    if path:
        plt.savefig(path, dpi=120)
        plt.close()
    else:
        plt.show()
    return path


class TrainingPlotter:
    """
    Visualize the training log (iteration, lr, train_loss, val_psnr).

    Attributes:
        filepath (str): Path to the metrics CSV written by the trainer.
        df (DataFrame): Loaded log.
    """
    def __init__(self, filepath='data/metrics/train_log.csv'):
        self.filepath = filepath
        self.df = None
        self.load_data()

    def load_data(self):
        self.df = pd.read_csv(self.filepath)

    def plot_loss_curve(self, path=None):
        """Training loss (log scale) and held-out PSNR per epoch."""
        fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(12, 5))
        sns.lineplot(data=self.df, x='iteration', y='train_loss', marker='o', ax=ax_loss)
        ax_loss.set_yscale('log')
        ax_loss.set_title('Training Loss')
        ax_loss.set_xlabel('Iteration')
        ax_loss.set_ylabel('Multi-scale L1')
        sns.lineplot(data=self.df.dropna(subset=['val_psnr']), x='iteration', y='val_psnr',
                     marker='o', color='darkorange', ax=ax_psnr)
        ax_psnr.set_title('Validation PSNR')
        ax_psnr.set_xlabel('Iteration')
        ax_psnr.set_ylabel('PSNR (dB)')
        return _finish(path)


class AblationPlotter:
    """Bar chart of mean PSNR per ablation arm."""

    def __init__(self, table):
        self.df = pd.read_csv(table) if isinstance(table, str) else table

    def plot_arms(self, path=None):
        data = self.df.assign(variant=self.df['wiener'].map({True: 'Wiener', False: 'no Wiener'})
                              + ', L=' + self.df['levels'].astype(str))
        plt.figure(figsize=(10, 5))
        sns.barplot(data=data, x='bank', y='psnr', hue='variant', palette='Set2')
        plt.title('Ablation: mean PSNR per arm')
        plt.xlabel('Filter bank')
        plt.ylabel('PSNR (dB)')
        plt.legend(title='Variant')
        return _finish(path)

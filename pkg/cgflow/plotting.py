"""
Plot output for cgflow runs (loss curves, sampled-graph galleries)
"""

import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')  # files only, never a display
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .graphdata import Graph
from .logger import get_logger

logger = get_logger("plotting")


class PlotWriter:
    """Saves matplotlib figures into <output_dir>/plots and remembers what it wrote"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.plots_dir = os.path.join(output_dir, 'plots')
        self.saved: List[Dict[str, str]] = []

    def _ensure_plots_dir(self):
        if not os.path.exists(self.plots_dir):
            os.makedirs(self.plots_dir, exist_ok=True)

    def save_figure(self, fig, filename: str, caption: str = '') -> Dict[str, str]:
        """Save a figure as PNG, close it and return its file info"""
        self._ensure_plots_dir()
        file_path = os.path.join(self.plots_dir, filename)
        fig.savefig(file_path, format='png', bbox_inches='tight', dpi=150)
        plt.close(fig)
        info = {
            'filename': filename,
            'file_path': file_path,
            'relative_path': f"plots/{filename}",
            'caption': caption,
        }
        self.saved.append(info)
        logger.debug(f"saved plot {file_path}")
        return info

    def loss_curve(self, curve: pd.DataFrame, filename: str = 'loss_curve.png') -> Dict[str, str]:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(curve['epoch'], curve['nll_bits_per_dim'], marker='o', linewidth=1.5)
        ax.set_xlabel('epoch')
        ax.set_ylabel('NLL (bits/dim)')
        ax.set_title('Training loss')
        ax.grid(True, alpha=0.3)
        return self.save_figure(fig, filename, 'training loss curve')

    def graph_gallery(self, graphs: Sequence[Graph], filename: str = 'samples.png',
                      cols: int = 4, limit: Optional[int] = 16) -> Dict[str, str]:
        """Draw graphs on circular layouts in a grid"""
        graphs = list(graphs)[:limit] if limit else list(graphs)
        rows = max(1, int(np.ceil(len(graphs) / cols)))
        fig, axes = plt.subplots(rows, cols, figsize=(2.5 * cols, 2.5 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.axis('off')
        for ax, g in zip(axes.ravel(), graphs):
            angles = 2.0 * np.pi * np.arange(g.n) / max(g.n, 1)
            xy = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            for u, v in g.edges:
                ax.plot(xy[[u, v], 0], xy[[u, v], 1], color='0.5', linewidth=0.8, zorder=1)
            ax.scatter(xy[:, 0], xy[:, 1], s=18, color='tab:blue', zorder=2)
            ax.set_title(f"n={g.n}, |E|={g.num_edges}", fontsize=8)
            ax.set_aspect('equal')
        return self.save_figure(fig, filename, f"{len(graphs)} sampled graphs")

"""Static figures for run reports. Everything renders off-screen to PNG."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from heart_surrogate.gsa import CHAMBERS, SobolResult  # noqa: E402
from heart_surrogate.lnode import Trajectory  # noqa: E402

logger = logging.getLogger(__name__)

DPI = 150
PathLike = Union[str, Path]


def _save(fig: plt.Figure, path: PathLike) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, bbox_inches='tight')
    plt.close(fig)
    logger.info('Wrote %s', path)
    return path


def sobol_heatmap(
    result: SobolResult,
    path: PathLike,
    kind: str = 'st',
    groups: Optional[Sequence[str]] = None,
) -> Path:
    """Parameters on rows (optionally tagged with their group), QoIs on columns."""
    values = result.st if kind == 'st' else result.s1
    rows = list(result.parameter_names)
    if groups is not None:
        rows = [f'{name} [{group}]' if group else name for name, group in zip(rows, groups)]
    fig, ax = plt.subplots(
        figsize=(0.32 * len(result.qoi_labels) + 3, 0.4 * len(rows) + 1.5)
    )
    image = ax.imshow(np.clip(values, 0.0, 1.0), vmin=0.0, vmax=1.0, cmap='viridis', aspect='auto')
    ax.set_xticks(range(len(result.qoi_labels)))
    ax.set_xticklabels(result.qoi_labels, rotation=90, fontsize=7)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows, fontsize=8)
    ax.set_title('Total-effect indices' if kind == 'st' else 'First-order indices')
    fig.colorbar(image, ax=ax)
    return _save(fig, path)


def corner_plot(
    names: Sequence[str],
    draws: np.ndarray,
    path: PathLike,
    truth: Optional[np.ndarray] = None,
) -> Path:
    """Marginal histograms on the diagonal and pairwise scatter below it."""
    dim = len(names)
    fig, axes = plt.subplots(dim, dim, figsize=(2.2 * dim, 2.2 * dim), squeeze=False)
    for i in range(dim):
        for j in range(dim):
            ax = axes[i, j]
            if j > i:
                ax.set_visible(False)
                continue
            if i == j:
                ax.hist(draws[:, i], bins=30, color='tab:blue', alpha=0.7)
                if truth is not None:
                    ax.axvline(truth[i], color='tab:red')
            else:
                ax.scatter(draws[:, j], draws[:, i], s=3, alpha=0.4)
                if truth is not None:
                    ax.plot(truth[j], truth[i], 'x', color='tab:red')
            if i == dim - 1:
                ax.set_xlabel(names[j])
            if j == 0 and i > 0:
                ax.set_ylabel(names[i])
    fig.tight_layout()
    return _save(fig, path)


def trace_plot(
    predictions: Sequence[Trajectory],
    targets: Sequence[Trajectory],
    path: PathLike,
    labels: Sequence[str] = ('p_LV', 'V_LV', 'p_RV', 'V_RV'),
) -> Path:
    fig, axes = plt.subplots(len(labels), 1, figsize=(6, 2 * len(labels)), sharex=True)
    for ax, label in zip(np.atleast_1d(axes), labels):
        for k, (pred, target) in enumerate(zip(predictions, targets)):
            line = ax.plot(target.times, target.trace(label), lw=1.2)[0]
            ax.plot(
                pred.times,
                pred.trace(label),
                '--',
                color=line.get_color(),
                lw=1.0,
                label='surrogate' if k == 0 else None,
            )
        ax.set_ylabel(label)
    np.atleast_1d(axes)[-1].set_xlabel('t [s]')
    np.atleast_1d(axes)[0].legend(loc='upper right', fontsize=7)
    return _save(fig, path)


def pv_loops(
    predictions: Sequence[Trajectory], targets: Sequence[Trajectory], path: PathLike
) -> Path:
    fig, axes = plt.subplots(1, len(CHAMBERS), figsize=(3.2 * len(CHAMBERS), 3.2))
    for ax, chamber in zip(axes, CHAMBERS):
        for pred, target in zip(predictions, targets):
            line = ax.plot(target.trace(f'V_{chamber}'), target.trace(f'p_{chamber}'), lw=1.2)[0]
            ax.plot(
                pred.trace(f'V_{chamber}'),
                pred.trace(f'p_{chamber}'),
                '--',
                color=line.get_color(),
                lw=1.0,
            )
        ax.set_title(chamber)
        ax.set_xlabel('V [mL]')
    axes[0].set_ylabel('p [mmHg]')
    fig.tight_layout()
    return _save(fig, path)

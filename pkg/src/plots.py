"""
Report figures.

Interactive versions are plotly HTML files; the headline figures are also
rendered to PNG with matplotlib (Agg backend) so a report can be read
without a browser.
"""
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

PALETTE = px.colors.qualitative.Set2


def _short(label):
    return label.split('/', 1)[0] if '/' in label else label


def accuracy_bars(report):
    """Clean, protected, best purified and the baselines side by side."""
    rows = []
    clean = (report.get('baselines') or {}).get('clean')
    if clean and clean['accuracy_mean'] is not None:
        rows.append({'variant': 'clean', 'accuracy': clean['accuracy_mean'], 'std': clean['accuracy_std']})
    for pid, entry in sorted(((report.get('baselines') or {}).get('protected') or {}).items()):
        if entry and entry['accuracy_mean'] is not None:
            rows.append({'variant': f"protected {pid}", 'accuracy': entry['accuracy_mean'],
                         'std': entry['accuracy_std']})
    for best in report.get('best', []):
        rows.append({'variant': f"purified N={best['n_pairs']} {best['schedule']} "
                                f"(s={best['s']}, β={best['beta']})",
                     'accuracy': best['accuracy_mean'], 'std': None})
    for d in report.get('dilution', []):
        if d.get('accuracy_mean') is not None:
            rows.append({'variant': f"dilution +{d['n_extra']} clean", 'accuracy': d['accuracy_mean'], 'std': None})
    for a in report.get('augmentations', []):
        if a.get('accuracy_mean') is not None:
            rows.append({'variant': f"augment {a['kind']}", 'accuracy': a['accuracy_mean'], 'std': None})
    df = pd.DataFrame(rows, columns=['variant', 'accuracy', 'std'])
    fig = px.bar(df, x='variant', y='accuracy', error_y='std', color='variant',
                 color_discrete_sequence=PALETTE, text_auto='.1f')
    fig.update_layout(title='Test accuracy (%)', showlegend=False, yaxis_range=[0, 100],
                      margin=dict(t=50, l=40, r=10, b=120))
    return fig, df


def grid_heatmap(grid, protection, n_pairs, schedule):
    """Accuracy over the (s, β) grid for one trained configuration."""
    cell = grid[(grid['protection'] == protection) & (grid['n_pairs'] == n_pairs) & (grid['schedule'] == schedule)]
    table = cell.pivot_table(index='s', columns='beta', values='accuracy_mean')
    fig = px.imshow(table, text_auto='.1f', color_continuous_scale='Viridis', aspect='auto',
                    labels=dict(x='β', y='s', color='accuracy %'))
    fig.update_layout(title=f"{protection} N={n_pairs} {schedule}: accuracy over s × β")
    return fig, table


def accuracy_vs_pairs(grid):
    """Best-over-grid accuracy as a function of the number of leaked pairs."""
    best = grid[grid['is_best']].sort_values('n_pairs')
    fig = px.line(best, x='n_pairs', y='accuracy_mean', color='schedule', markers=True,
                  line_dash='protection', hover_data=['s', 'beta'])
    fig.update_layout(title='Purified accuracy vs leaked pairs', xaxis_title='N (pairs)',
                      yaxis_title='accuracy %')
    return fig


def partial_leakage_bars(partial):
    """Per-class accuracy before and after purification; leaked classes are marked."""
    run = partial['runs'][0]
    leaked = set(partial['leaked_classes'])
    classes = sorted(int(c) for c in run['per_class_protected'])
    names = [f"{c}{' *' if c in leaked else ''}" for c in classes]

    def per_class(key):
        values = {int(c): v for c, v in run[key].items()}
        return [values.get(c) for c in classes]

    fig = go.Figure()
    fig.add_trace(go.Bar(x=names, y=per_class('per_class_protected'),
                         name='protected', marker_color=PALETTE[1]))
    fig.add_trace(go.Bar(x=names, y=per_class('per_class_purified'),
                         name='purified', marker_color=PALETTE[0]))
    fig.update_layout(barmode='group', title='Per-class accuracy (* = leaked class)',
                      xaxis_title='class', yaxis_title='accuracy %')
    return fig


def transfer_heatmap(transfer):
    df = pd.DataFrame(transfer)
    table = df.pivot_table(index='train_protection', columns='target_protection', values='accuracy_mean')
    fig = px.imshow(table, text_auto='.1f', color_continuous_scale='Blues', aspect='auto',
                    labels=dict(x='purified protection', y='model trained on', color='accuracy %'))
    fig.update_layout(title='Cross-protection transfer')
    return fig


def fidelity_boxes(fidelity):
    """PSNR and SSIM distributions per variant."""
    figs = {}
    for metric in ('psnr', 'ssim'):
        fig = px.box(fidelity, x='variant', y=metric, color='variant', color_discrete_sequence=PALETTE)
        fig.update_layout(title=f"{metric.upper()} against clean images", showlegend=False,
                          margin=dict(t=50, l=40, r=10, b=160))
        figs[metric] = fig
    return figs


def _png_bars(df, path):
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(df)), 4))
    ax.bar(np.arange(len(df)), df['accuracy'], yerr=df['std'].fillna(0), color='#66c2a5')
    ax.set_xticks(np.arange(len(df)))
    ax.set_xticklabels(df['variant'], rotation=35, ha='right', fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel('accuracy %')
    ax.grid(True, axis='y', alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _png_heatmap(table, title, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(table.to_numpy(dtype=float), cmap='viridis', vmin=0, vmax=100)
    ax.set_xticks(np.arange(table.shape[1]))
    ax.set_xticklabels([f"{b:g}" for b in table.columns])
    ax.set_yticks(np.arange(table.shape[0]))
    ax.set_yticklabels([f"{s:g}" for s in table.index])
    ax.set_xlabel('β')
    ax.set_ylabel('s')
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_plots(report, grid, fidelity, plots_dir):
    """Render every figure the report supports. Returns the written paths."""
    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = plots_dir / f"{name}.html"
        fig.write_html(path, include_plotlyjs='cdn')
        written.append(path)

    fig, bars = accuracy_bars(report)
    save(fig, 'accuracy')
    if not bars.empty:
        _png_bars(bars, plots_dir / 'accuracy.png')
        written.append(plots_dir / 'accuracy.png')

    if len(grid) and grid['accuracy_mean'].notna().any():
        for (pid, n, mode), _ in grid.groupby(['protection', 'n_pairs', 'schedule'], sort=True):
            fig, table = grid_heatmap(grid, pid, n, mode)
            name = f"grid-{pid}-N{n}-{mode}"
            save(fig, name)
            if table.size:
                _png_heatmap(table, f"{pid} N={n} {mode}", plots_dir / f"{name}.png")
                written.append(plots_dir / f"{name}.png")
        if grid['n_pairs'].nunique() > 1:
            save(accuracy_vs_pairs(grid), 'accuracy-vs-pairs')

    partial = report.get('partial_leakage')
    if partial and partial.get('runs'):
        save(partial_leakage_bars(partial), 'partial-leakage')

    transfer = [t for t in report.get('transfer', []) if t.get('accuracy_mean') is not None]
    if transfer:
        save(transfer_heatmap(transfer), 'transfer')

    if len(fidelity):
        for metric, fig in fidelity_boxes(fidelity).items():
            save(fig, f"fidelity-{metric}")

    logger.info(f"📊 {len(written)} plot files in {plots_dir}")
    return written

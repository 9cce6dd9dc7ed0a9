"""
Plot-ready tables from threshold fits.
"""

import json
import logging
from pathlib import Path

import pandas as pd

from .fitting import prepost_summary

logger = logging.getLogger(__name__)


def threshold_scatter(fit, period='pre', base_race='White'):
    """
    One row per (location, minority race): the base race's threshold against
    the minority threshold, with location stops as a point size.
    """
    cells = pd.DataFrame(fit.cell_summary(period))
    base = cells[cells['race'] == base_race].set_index('location')
    rows = []
    for _, cell in cells[cells['race'] != base_race].iterrows():
        if cell['location'] not in base.index:
            continue
        reference = base.loc[cell['location']]
        rows.append({
            'location': cell['location'],
            'race': cell['race'],
            'base_threshold': reference['mean'],
            'minority_threshold': cell['mean'],
            'minority_lower': cell['lower'],
            'minority_upper': cell['upper'],
            'location_stops': cell['location_stops'],
        })
    return pd.DataFrame(rows, columns=[
        'location', 'race', 'base_threshold', 'minority_threshold',
        'minority_lower', 'minority_upper', 'location_stops',
    ])


def write_fit_outputs(fit, directory, check=None, prefix='threshold'):
    """
    Write a fit's summary JSON, cell thresholds, scatter data, pre/post
    aggregates and (when given) the predictive check. Returns written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    summary = fit.to_dict()
    if check is not None:
        summary['ppc'] = check.to_dict()
    path = directory / f"{prefix}_summary.json"
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(summary, handle, indent=2, sort_keys=True, default=float)
    written.append(path)

    tables = {
        f"{prefix}_cells.csv": pd.DataFrame(summary['thresholds']),
        f"{prefix}_scatter.csv": threshold_scatter(fit),
        f"{prefix}_aggregates.csv": pd.DataFrame(prepost_summary(fit)),
    }
    if check is not None:
        tables[f"{prefix}_ppc.csv"] = pd.DataFrame(check.rows)
    for name, frame in tables.items():
        path = directory / name
        frame.to_csv(path, index=False, lineterminator='\n')
        written.append(path)

    draws_dir = fit.draws.save(directory / f"{prefix}_draws")
    written.append(draws_dir)
    logger.info(f"Wrote {len(written)} threshold outputs to {directory}")
    return written

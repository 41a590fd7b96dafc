import logging
import random
from pathlib import Path

import numpy as np
import pandas as pd
import torch


def seed_everything(seed: int, threads: int = 1) -> None:
    """
    Seeds python, numpy and torch and pins the torch thread count, so that a
    run depends only on its seed.
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """
    Writes a frame in the toolkit's CSV dialect: comma separated, '.'
    decimal, header row, LF line endings, no index.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    logging.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def write_text(text: str, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path

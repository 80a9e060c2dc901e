"""Coarsening, per-image scaling and dataset assembly."""
import json
from pathlib import Path

import numpy as np

from . import tensorio
from .microgen import Microstructure


class MissingSamples(FileNotFoundError):
    def __init__(self, ids):
        self.ids = list(ids)
        shown = ", ".join(self.ids[:10]) + (" ..." if len(self.ids) > 10 else "")
        super().__init__(f"{len(self.ids)} sample(s) missing: {shown}")


def downsample(vm, factor=4):
    """Mean over disjoint ``factor x factor`` blocks (stride = factor, no padding)."""
    a = np.asarray(vm)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
    h, w, c = a.shape
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by {factor}")
    out = a.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return out[..., 0] if squeeze else out


def scale_unit(t, per_channel=True):
    """Min-max scale to [0, 1]; a constant channel maps to zeros."""
    a = np.asarray(t, dtype=np.float64)
    axes = tuple(range(a.ndim - 1)) if per_channel else None
    lo = a.min(axis=axes, keepdims=True)
    span = a.max(axis=axes, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (a - lo) / safe, 0.0)


def make_sample(ms, vm):
    """Model input (H, W, 4) and target (H/4, W/4, 1), both scaled to [0, 1]."""
    x = scale_unit(np.concatenate([ms.euler, ms.gb], axis=-1))
    y = scale_unit(downsample(vm))
    return x.astype(np.float32), y.astype(np.float32)


def _vm_path(vm_dir, sid):
    return Path(vm_dir) / f"{sid}_vm.gtns"


def assemble(ms_dir, vm_dir, manifest, out_dir):
    """Write ``<split>_x.gtns``, ``<split>_y.gtns``, ``truth/<id>.gtns`` and ``index.json``.

    Samples within a split are ordered by id.
    """
    ms_dir, vm_dir, out = Path(ms_dir), Path(vm_dir), Path(out_dir)
    ids = manifest.ids
    missing = [i for i in ids
               if not (ms_dir / manifest.files.get(i, i)).is_dir() or not _vm_path(vm_dir, i).exists()]
    if missing:
        raise MissingSamples(missing)
    out.mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    index = {"seed": manifest.seed, "splits": {}}
    for split in tensorio.SPLITS:
        sids = sorted(manifest.splits[split])
        xs, ys = [], []
        for sid in sids:
            ms = Microstructure.load(ms_dir / manifest.files.get(sid, sid))
            vm = tensorio.read_tensor(_vm_path(vm_dir, sid))
            x, y = make_sample(ms, vm)
            xs.append(x)
            ys.append(y)
            tensorio.write_tensor(out / "truth" / f"{sid}.gtns", y)
        tensorio.write_tensor(out / f"{split}_x.gtns", np.stack(xs))
        tensorio.write_tensor(out / f"{split}_y.gtns", np.stack(ys))
        index["splits"][split] = sids
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out


def load_split(data_dir, split):
    d = Path(data_dir)
    x = tensorio.read_tensor(d / f"{split}_x.gtns")
    y = tensorio.read_tensor(d / f"{split}_y.gtns")
    ids = json.loads((d / "index.json").read_text())["splits"][split]
    return x, y, ids

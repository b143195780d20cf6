"""Checkpoints: one flat binary of parameter arrays plus a JSON manifest.

The manifest records (name, shape, byte offset) per array along with the
config echo and the fitted scaler, which is everything needed to rebuild the
federation and evaluate any split.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from fedcast.config import ExperimentConfig, config_from_dict, build_dataset_from_config
from fedcast.protocol import Federation, FederationConfig


def save_checkpoint(manifest_path, fed: Federation, cfg: ExperimentConfig,
                    history: dict | None = None) -> None:
    manifest_path = Path(manifest_path)
    bin_path = manifest_path.with_suffix(".bin")
    arrays = []
    offset = 0
    chunks = []
    parties = {"active": fed.active.params}
    for p in fed.passives:
        parties[p.party_id] = p.params
    for party, params in parties.items():
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            arrays.append({
                "name": f"{party}/{name}",
                "shape": list(data.shape),
                "offset": offset,
                "nbytes": data.nbytes,
            })
            chunks.append(data.tobytes())
            offset += data.nbytes
    manifest = {
        "schema_version": 1,
        "binary": bin_path.name,
        "dtype": "float64",
        "arrays": arrays,
        "config": cfg.to_dict(),
        "scaler": fed.dataset.active.scaler.to_dict(),
        "history": history or {},
    }
    with open(bin_path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(manifest_path) -> tuple[Federation, ExperimentConfig, dict]:
    """Rebuild the federation (dataset regenerated from the config echo) and
    restore every parameter array from the flat binary."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    blob = (manifest_path.parent / manifest["binary"]).read_bytes()
    dataset = build_dataset_from_config(cfg)
    m = cfg.model
    fed = Federation(
        dataset,
        FederationConfig(hidden=m.hidden, temporal_layers=m.temporal_layers,
                         spatial_layers=m.spatial_layers, neighbors=m.neighbors,
                         heads=m.heads, adaptive_rank=m.adaptive_rank,
                         predict_from_fused=m.predict_from_fused),
        cfg.dp.to_dp_config(), seed=cfg.seed,
    )
    parties = {"active": fed.active.params}
    for p in fed.passives:
        parties[p.party_id] = p.params
    for entry in manifest["arrays"]:
        party, name = entry["name"].split("/", 1)
        arr = np.frombuffer(blob, dtype=np.float64,
                            count=entry["nbytes"] // 8,
                            offset=entry["offset"]).reshape(entry["shape"])
        if name not in parties[party]:
            raise ValueError(f"checkpoint array {entry['name']!r} has no matching parameter")
        parties[party][name][...] = arr
    return fed, cfg, manifest.get("history", {})

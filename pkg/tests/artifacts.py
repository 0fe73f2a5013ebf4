"""Cached desk-scale artifacts shared by the acceptance suite and the demos.

Trained networks and grid solutions are keyed by a hash of everything that
determines them, so changing a setting retrains instead of silently reusing
a stale file. Set ``RBN_ARTIFACTS`` to relocate the cache.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import torch

from rbn.dynamics import Air3D, Dubins3D, MultiVehicle9D, SystemModel
from rbn.grid_solver import Grid, GridValue, solve
from rbn.io import read_checkpoint, read_grid, write_checkpoint, write_grid
from rbn.network import ValueNet
from rbn.training import TrainConfig, train

ROOT = Path(os.environ.get("RBN_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts"))
GAMMAS = (0.0, 0.3, 0.5, 1.0)

DUBINS_TRAIN = TrainConfig(
    epochs=12_000, pretrain_epochs=800, samples_per_epoch=8_000, learning_rate=1e-4,
    hidden_layers=3, hidden_size=128, seed=0, log_every=1000,
)
# the 9D joint model is desk-scale too: same width as the 3D net
MULTI_TRAIN = TrainConfig(
    epochs=20_000, pretrain_epochs=1_500, samples_per_epoch=8_000, learning_rate=1e-4,
    hidden_layers=3, hidden_size=128, seed=1, log_every=1000,
)
MULTI_SYSTEM = MultiVehicle9D(collision_radius=0.4)

log = logging.getLogger(__name__)


def _key(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def get_net(system: SystemModel, config: TrainConfig, tag: str) -> ValueNet:
    cfg = config.to_dict()
    cfg.pop("log_every")
    path = ROOT / f"{tag}_{_key({'system': system.config(), 'train': cfg})}.ckpt"
    if path.exists():
        return read_checkpoint(path)[0]
    torch.set_num_threads(1)
    log.warning("training %s (%d epochs); cached at %s", tag, config.epochs, path)
    net, report = train(system, None, config)
    write_checkpoint(path, net, {"train": cfg, "final_loss": report.losses[-1]})
    return net


def dubins_net() -> ValueNet:
    return get_net(Dubins3D(), DUBINS_TRAIN, "dubins3d")


def multi_net() -> ValueNet:
    return get_net(MULTI_SYSTEM, MULTI_TRAIN, "multivehicle9d")


def get_grid(system: SystemModel, counts, gamma: float, horizon: float = 1.0) -> GridValue:
    tag = f"{system.name}_{'x'.join(map(str, counts))}_g{gamma:g}_h{horizon:g}"
    path = ROOT / f"{tag}_{_key(system.config())}.grid"
    if path.exists():
        return read_grid(path)
    V = solve(Grid.for_system(system, counts), system, gamma, horizon)[-1]
    write_grid(path, V)
    return V


def dubins_grids() -> dict[float, GridValue]:
    return {g: get_grid(Dubins3D(), (61, 61, 41), g) for g in GAMMAS}


def pair_grids(gammas=(0.0, 0.5, 1.0)) -> dict[float, GridValue]:
    return {g: get_grid(Air3D(), (61, 61, 41), g) for g in gammas}


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    dubins_grids()
    pair_grids()
    dubins_net()
    multi_net()

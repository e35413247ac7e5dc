"""Grid pointing game, gradient-based baselines and the B ablation harness."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import GridError, ShapeError
from .explain import collapse_batch
from .models import BcosNetwork, stable_sigmoid
from .tensor import Tensor

METHODS = ("inherent", "grad", "ixg", "intgrad", "uniform")


@dataclass
class GridGame:
    image: np.ndarray                 # [C, n*S, n*S]
    cell_classes: np.ndarray          # [n*n], row-major cell order
    cell_geometry: list               # [(y0, x0, y1, x1)] per cell
    source_indices: np.ndarray        # dataset index placed in each cell
    grid_n: int

    def cell_mask(self, j: int) -> np.ndarray:
        y0, x0, y1, x1 = self.cell_geometry[j]
        m = np.zeros(self.image.shape[1:], dtype=bool)
        m[y0:y1, x0:x1] = True
        return m


@dataclass
class LocalizationScore:
    method: str
    scores: np.ndarray                # [n_grids, n*n]
    classes: np.ndarray               # [n_grids, n*n]
    flagged: np.ndarray               # cells whose map had no positive mass

    # exact rational aggregation: a constant score list has exactly that mean
    @property
    def mean(self) -> float:
        return float(statistics.mean(self.scores.ravel().tolist()))

    @property
    def std(self) -> float:
        return float(statistics.pstdev(self.scores.ravel().tolist()))

    @property
    def n(self) -> int:
        return int(self.scores.size)


def model_confidence(net: BcosNetwork, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """Sigmoid probability each image receives for its own label."""
    z = net.logits_numpy(ds.images, batch_size).astype(np.float64) + net.bias
    p = stable_sigmoid(z)
    return p[np.arange(len(ds)), ds.labels]


def compose_grid(images: np.ndarray, grid_n: int) -> tuple[np.ndarray, list]:
    c, h, w = images.shape[1:]
    out = np.empty((c, grid_n * h, grid_n * w), dtype=images.dtype)
    geom = []
    for j, img in enumerate(images):
        r, q = divmod(j, grid_n)
        out[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = img
        geom.append((r * h, q * w, (r + 1) * h, (q + 1) * w))
    return out, geom


def build_grids(dataset: Dataset, model: BcosNetwork | None, n_grids: int, grid_n: int = 3,
                seed: int = 0, confidence: np.ndarray | None = None) -> list[GridGame]:
    """Compose ``n_grids`` mosaics of ``grid_n**2`` distinct classes.

    Images of each class are ranked by the model's confidence; every grid
    takes the most confident not-yet-used image of each sampled class.
    """
    cells = grid_n * grid_n
    K = dataset.num_classes
    if K < cells:
        raise GridError(f"{grid_n}x{grid_n} grids need {cells} distinct classes, dataset has {K}")
    if confidence is None:
        confidence = model_confidence(model, dataset)
    queues = {}
    for k in range(K):
        idx = np.flatnonzero(dataset.labels == k)
        queues[k] = list(idx[np.argsort(-confidence[idx], kind="stable")])
    rng = np.random.default_rng(seed)
    games = []
    for g in range(n_grids):
        classes = rng.choice(K, size=cells, replace=False)
        picks = []
        for k in classes:
            if not queues[k]:
                raise GridError(f"class {k} ran out of images after {g} grids")
            picks.append(queues[k].pop(0))
        picks = np.array(picks)
        image, geom = compose_grid(dataset.images[picks], grid_n)
        games.append(GridGame(image, classes.astype(np.int64), geom, picks, grid_n))
    return games


def score_map(game: GridGame, attribution: np.ndarray, cell: int) -> tuple[float, bool]:
    """Fraction of positive attribution mass inside ``cell``; (0, True) if there is none."""
    attribution = np.asarray(attribution, dtype=np.float64)
    if attribution.shape != game.image.shape[1:]:
        raise ShapeError(f"attribution shape {attribution.shape} != grid shape "
                         f"{game.image.shape[1:]}", attribution.shape, game.image.shape[1:])
    pos = np.maximum(attribution, 0)
    total = pos.sum()
    if total <= 0:
        return 0.0, True
    y0, x0, y1, x1 = game.cell_geometry[cell]
    return float(pos[y0:y1, x0:x1].sum() / total), False


def score_attribution(game: GridGame, maps, method: str = "") -> LocalizationScore:
    """Score one grid given one attribution map per cell (for that cell's class)."""
    maps = np.asarray(maps)
    if len(maps) != len(game.cell_classes):
        raise ShapeError(f"need {len(game.cell_classes)} maps, got {len(maps)}", maps.shape)
    res = [score_map(game, m, j) for j, m in enumerate(maps)]
    return LocalizationScore(method, np.array([[s for s, _ in res]]),
                             game.cell_classes[None].copy(), np.array([[f for _, f in res]]))


# attribution methods: x [N, C, H, W], classes [N] -> maps [N, H, W]

def _batch(net, x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    return (x[None] if x.ndim == 3 else x).astype(net.dtype, copy=False)


def _classes(c, n):
    return np.broadcast_to(np.asarray(c, dtype=int), (n,))


def input_gradient(net: BcosNetwork, x, classes) -> np.ndarray:
    """d logit_c / d x through the full (unfrozen) network."""
    xb = _batch(net, x)
    cls = _classes(classes, len(xb))
    xt = Tensor(xb, requires_grad=True)
    with T.parameters_requiring_grad(net.parameters(), False):
        out = net.forward_logits(xt)
    seed = np.zeros(out.shape, dtype=out.dtype)
    seed[np.arange(len(xb)), cls] = 1
    out.backward(seed)
    return xt.grad


def attribution_grad(net, x, classes) -> np.ndarray:
    return input_gradient(net, x, classes).sum(axis=1)


def attribution_ixg(net, x, classes) -> np.ndarray:
    xb = _batch(net, x)
    return (input_gradient(net, xb, classes) * xb).sum(axis=1)


def attribution_intgrad(net, x, classes, steps: int = 50, baseline=None,
                        chunk: int = 256) -> np.ndarray:
    """Integrated gradients from ``baseline`` (zero input by default), midpoint rule."""
    xb = _batch(net, x)
    cls = _classes(classes, len(xb))
    x0 = np.zeros_like(xb) if baseline is None else np.broadcast_to(baseline, xb.shape).astype(xb.dtype)
    alphas = ((np.arange(steps) + 0.5) / steps).astype(xb.dtype)
    out = np.empty((len(xb),) + xb.shape[2:], dtype=np.float64)
    per = max(1, chunk // steps)
    for i in range(0, len(xb), per):
        xs, bs, cs = xb[i:i + per], x0[i:i + per], cls[i:i + per]
        gsum = np.zeros(xs.shape, dtype=np.float64)
        path = bs[:, None] + alphas[None, :, None, None, None] * (xs - bs)[:, None]
        flat = path.reshape((-1,) + xs.shape[1:])
        fcls = np.repeat(cs, steps)
        for j in range(0, len(flat), chunk):
            g = input_gradient(net, flat[j:j + chunk], fcls[j:j + chunk])
            idx = np.arange(j, j + len(g)) // steps
            np.add.at(gsum, idx, g)
        out[i:i + per] = ((xs - bs) * gsum / steps).sum(axis=1)
    return out


def attribution_inherent(net, x, classes) -> np.ndarray:
    """Contribution map of the dynamic linear row: channel-summed row * x."""
    xb = _batch(net, x)
    rows, _ = collapse_batch(net, xb, _classes(classes, len(xb)))
    return (rows * xb).sum(axis=1)


def attribution_uniform(net, x, classes) -> np.ndarray:
    xb = _batch(net, x)
    return np.ones((len(xb),) + xb.shape[2:])


ATTRIBUTIONS = {"inherent": attribution_inherent, "grad": attribution_grad,
                "ixg": attribution_ixg, "intgrad": attribution_intgrad,
                "uniform": attribution_uniform}


def evaluate_localization(net: BcosNetwork, games: list[GridGame], methods=("inherent",),
                          batch_size: int = 64, steps: int = 50) -> dict[str, LocalizationScore]:
    """Localisation score of every method on every cell of every grid."""
    if not games:
        raise GridError("no grids to evaluate")
    images = np.stack([g.image for g in games])
    classes = np.stack([g.cell_classes for g in games])
    out = {}
    for method in methods:
        if method not in ATTRIBUTIONS:
            raise ValueError(f"unknown attribution method {method!r}")
        fn = ATTRIBUTIONS[method]
        if method == "intgrad":
            fn = partial(attribution_intgrad, steps=steps)
        scores = np.zeros(classes.shape)
        flagged = np.zeros(classes.shape, dtype=bool)
        for j in range(classes.shape[1]):
            for i in range(0, len(games), batch_size):
                maps = fn(net, images[i:i + batch_size], classes[i:i + batch_size, j])
                for gi, m in enumerate(maps, start=i):
                    scores[gi, j], flagged[gi, j] = score_map(games[gi], m, j)
        out[method] = LocalizationScore(method, scores, classes, flagged)
    return out


def write_results(scores: dict[str, LocalizationScore], results_path=None, aggregate_path=None):
    if results_path:
        with open(results_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "grid_id", "cell", "class", "score"])
            for method, sc in scores.items():
                for g in range(sc.scores.shape[0]):
                    for j in range(sc.scores.shape[1]):
                        w.writerow([method, g, j, int(sc.classes[g, j]), repr(float(sc.scores[g, j]))])
    if aggregate_path:
        with open(aggregate_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "mean", "std", "n"])
            for method, sc in scores.items():
                w.writerow([method, repr(sc.mean), repr(sc.std), sc.n])


@dataclass
class AblationRow:
    B: float
    accuracy: float
    localization: float
    train_acc: float = float("nan")


def b_ablation(B_list, train_set: Dataset, test_set: Dataset, config, grid_n: int = 2,
               n_grids: int = 100, channels: int = 16, csv_path=None, builder=None,
               log=None) -> list[AblationRow]:
    """Train one network per B with identical seeds and score inherent-map localisation."""
    from .models import build_tiny
    from .training import accuracy, train

    if not len(B_list):
        raise ValueError("B_list must not be empty")
    rows = []
    for B in B_list:
        cfg = replace(config, B=float(B))
        if builder is None:
            net = build_tiny(B=B, maxout=cfg.maxout, channels=channels,
                             num_classes=train_set.num_classes, seed=cfg.seed)
        else:
            net = builder(B, cfg)
        net, hist = train(net, train_set, cfg)
        games = build_grids(test_set, net, n_grids, grid_n, seed=cfg.seed)
        loc = evaluate_localization(net, games, ("inherent",))["inherent"].mean
        row = AblationRow(float(B), accuracy(net, test_set), loc, hist[-1]["train_acc"])
        rows.append(row)
        if log:
            log(row)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["B", "accuracy", "localization", "train_acc"])
            for r in rows:
                w.writerow([repr(r.B), repr(r.accuracy), repr(r.localization), repr(r.train_acc)])
    return rows

"""A small trainable per-pixel classifier.

The model is a 3x3 windowed linear filter bank with a tanh nonlinearity,
followed by a linear classifier over all classes seen so far plus
background. It is deliberately shallow: fast on CPU, fully differentiable,
and strong enough to create the per-class performance disparities the
selection agent feeds on. The classifier head grows as stages introduce new
classes; old columns are never touched by the extension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MismatchError
from .worlds import Sample


@dataclass(frozen=True)
class SegmenterConfig:
    feat_hidden: int = 16
    window: int = 3
    learning_rate: float = 0.2
    momentum: float = 0.9
    batch_size: int = 8
    head_init_scale: float = 1e-2
    confidence_threshold: float = 0.8


@dataclass
class PredictionResult:
    mask: np.ndarray        # (H, W) int32 argmax class ids
    confidence: np.ndarray  # (H, W) float64 max softmax probability


def _im2col(pixels: np.ndarray, window: int) -> np.ndarray:
    """(H, W, F) -> (H*W, window*window*F) with zero padding."""
    h, w, f = pixels.shape
    pad = window // 2
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    # view: (H, W, F, window, window) -> (H, W, window, window, F)
    view = view.transpose(0, 1, 3, 4, 2)
    return view.reshape(h * w, window * window * f)


class SegModel:
    """Windowed filter bank + tanh + linear head, trained with momentum SGD."""

    def __init__(self, feature_dim: int, config: SegmenterConfig = SegmenterConfig(), seed: int = 0):
        self.config = config
        self.feature_dim = feature_dim
        k = config.window * config.window * feature_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 401]))
        a = np.sqrt(6.0 / (k + config.feat_hidden))
        self.W = rng.uniform(-a, a, size=(k, config.feat_hidden))
        self.b = np.zeros(config.feat_hidden)
        self.class_ids: list[int] = [0]
        self.V = rng.uniform(-config.head_init_scale, config.head_init_scale,
                             size=(config.feat_hidden, 1))
        self.c = np.zeros(1)
        self._head_rng = rng
        self._vel = {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b),
                     "V": np.zeros_like(self.V), "c": np.zeros_like(self.c)}

    # -- class head -----------------------------------------------------

    def ensure_classes(self, class_ids) -> None:
        """Extend the head with columns for unseen class ids (old columns untouched)."""
        for cid in sorted(set(int(c) for c in class_ids)):
            if cid in self.class_ids:
                continue
            col = self._head_rng.uniform(-self.config.head_init_scale,
                                         self.config.head_init_scale,
                                         size=(self.config.feat_hidden, 1))
            self.V = np.hstack([self.V, col])
            self.c = np.append(self.c, 0.0)
            self._vel["V"] = np.hstack([self._vel["V"], np.zeros_like(col)])
            self._vel["c"] = np.append(self._vel["c"], 0.0)
            self.class_ids.append(cid)

    def _column_of(self) -> dict[int, int]:
        return {cid: i for i, cid in enumerate(self.class_ids)}

    # -- forward --------------------------------------------------------

    def _hidden_flat(self, pixels: np.ndarray) -> np.ndarray:
        cols = _im2col(pixels, self.config.window)
        return np.tanh(cols @ self.W + self.b)

    def pixel_features(self, sample_or_pixels) -> np.ndarray:
        """Hidden-layer activations, shape (H, W, feat_hidden)."""
        pixels = sample_or_pixels.pixels if isinstance(sample_or_pixels, Sample) else sample_or_pixels
        h, w, _ = pixels.shape
        return self._hidden_flat(pixels).reshape(h, w, self.config.feat_hidden)

    def logits(self, pixels: np.ndarray) -> np.ndarray:
        h, w, _ = pixels.shape
        z = self._hidden_flat(pixels) @ self.V + self.c
        return z.reshape(h, w, len(self.class_ids))

    def predict(self, sample_or_pixels) -> PredictionResult:
        pixels = sample_or_pixels.pixels if isinstance(sample_or_pixels, Sample) else sample_or_pixels
        z = self.logits(pixels)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        idx = p.argmax(axis=-1)
        mask = np.asarray(self.class_ids, dtype=np.int32)[idx]
        conf = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
        return PredictionResult(mask=mask, confidence=conf)

    def feature_vjp(self, pixels: np.ndarray, grad_hidden: np.ndarray) -> np.ndarray:
        """Backpropagate a cotangent on the hidden features to the input pixels."""
        h, w, f = pixels.shape
        win = self.config.window
        pad = win // 2
        hid = self._hidden_flat(pixels)
        da = (1.0 - hid * hid) * grad_hidden.reshape(h * w, -1)
        dcols = (da @ self.W.T).reshape(h, w, win, win, f)
        out = np.zeros((h + 2 * pad, w + 2 * pad, f))
        for i in range(win):
            for j in range(win):
                out[i:i + h, j:j + w, :] += dcols[:, :, i, j, :]
        return out[pad:pad + h, pad:pad + w, :]

    # -- training -------------------------------------------------------

    def _targets(self, labels: np.ndarray) -> np.ndarray:
        col = self._column_of()
        missing = [int(v) for v in np.unique(labels) if int(v) not in col]
        if missing:
            raise MismatchError(f"labels {missing} not covered by the class head")
        lut = np.zeros(max(self.class_ids) + 1, dtype=np.int64)
        for cid, i in col.items():
            lut[cid] = i
        return lut[labels.reshape(-1)]

    def train_stage(self, samples: list[Sample], epochs: int, seed: int = 0,
                    pseudo_threshold: float | None = None) -> list[float]:
        """Minibatch cross-entropy training on pseudo-labeled targets.

        Returns the per-epoch mean loss trace. Zero epochs is a no-op.
        """
        if not samples:
            raise ValueError("training set is empty")
        thr = self.config.confidence_threshold if pseudo_threshold is None else pseudo_threshold
        targets = [self._targets(pseudo_label(self, s, thr)) for s in samples]
        pixel_stack = [s.pixels for s in samples]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 701]))
        losses: list[float] = []
        bs = self.config.batch_size
        for _ in range(int(epochs)):
            order = rng.permutation(len(samples))
            epoch_loss = 0.0
            npx = 0
            for start in range(0, len(samples), bs):
                batch = order[start:start + bs]
                loss, n = self._sgd_step([pixel_stack[i] for i in batch],
                                         [targets[i] for i in batch])
                epoch_loss += loss * n
                npx += n
            losses.append(epoch_loss / max(npx, 1))
        return losses

    def _sgd_step(self, pixel_list, target_list) -> tuple[float, int]:
        cols = np.vstack([_im2col(p, self.config.window) for p in pixel_list])
        t = np.concatenate(target_list)
        n = t.shape[0]
        a = cols @ self.W + self.b
        hid = np.tanh(a)
        z = hid @ self.V + self.c
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(-np.log(np.maximum(p[np.arange(n), t], 1e-300)).mean())
        dz = p
        dz[np.arange(n), t] -= 1.0
        dz /= n
        gV = hid.T @ dz
        gc = dz.sum(axis=0)
        dh = dz @ self.V.T
        da = (1.0 - hid * hid) * dh
        gW = cols.T @ da
        gb = da.sum(axis=0)
        lr, mu = self.config.learning_rate, self.config.momentum
        for name, g in (("W", gW), ("b", gb), ("V", gV), ("c", gc)):
            vel = self._vel[name]
            vel *= mu
            vel -= lr * g
            param = getattr(self, name)
            param += vel
        return loss, n

    # -- evaluation -----------------------------------------------------

    def per_class_iou(self, eval_set: list[Sample], classes) -> dict[int, float]:
        """Global per-class IoU over the set; zero-union classes are omitted."""
        if not eval_set:
            raise ValueError("eval set is empty")
        classes = [int(c) for c in classes]
        inter = {c: 0 for c in classes}
        union = {c: 0 for c in classes}
        for s in eval_set:
            pred = self.predict(s).mask
            for c in classes:
                pm = pred == c
                gm = s.labels == c
                inter[c] += int(np.logical_and(pm, gm).sum())
                union[c] += int(np.logical_or(pm, gm).sum())
        return {c: inter[c] / union[c] for c in classes if union[c] > 0}

    # -- checkpointing ----------------------------------------------------

    def save(self, path: str) -> None:
        np.savez(path,
                 W=self.W, b=self.b, V=self.V, c=self.c,
                 class_ids=np.asarray(self.class_ids, dtype=np.int64),
                 vel_W=self._vel["W"], vel_b=self._vel["b"],
                 vel_V=self._vel["V"], vel_c=self._vel["c"],
                 feature_dim=np.int64(self.feature_dim),
                 feat_hidden=np.int64(self.config.feat_hidden),
                 window=np.int64(self.config.window),
                 learning_rate=np.float64(self.config.learning_rate),
                 momentum=np.float64(self.config.momentum),
                 batch_size=np.int64(self.config.batch_size),
                 head_init_scale=np.float64(self.config.head_init_scale),
                 confidence_threshold=np.float64(self.config.confidence_threshold))

    @classmethod
    def load(cls, path: str) -> "SegModel":
        d = np.load(path)
        cfg = SegmenterConfig(feat_hidden=int(d["feat_hidden"]), window=int(d["window"]),
                              learning_rate=float(d["learning_rate"]), momentum=float(d["momentum"]),
                              batch_size=int(d["batch_size"]), head_init_scale=float(d["head_init_scale"]),
                              confidence_threshold=float(d["confidence_threshold"]))
        model = cls(int(d["feature_dim"]), cfg)
        model.W = d["W"].copy()
        model.b = d["b"].copy()
        model.V = d["V"].copy()
        model.c = d["c"].copy()
        model.class_ids = [int(x) for x in d["class_ids"]]
        model._vel = {"W": d["vel_W"].copy(), "b": d["vel_b"].copy(),
                      "V": d["vel_V"].copy(), "c": d["vel_c"].copy()}
        return model


def pseudo_label(model: SegModel, sample: Sample, threshold: float = 0.8) -> np.ndarray:
    """Labeled pixels keep their label; background pixels take the model's
    prediction where its confidence strictly exceeds the threshold."""
    pred = model.predict(sample)
    out = sample.labels.copy()
    bg = sample.labels == 0
    confident = bg & (pred.confidence > threshold)
    out[confident] = pred.mask[confident]
    return out


def mean_iou(iou_map: dict[int, float], classes) -> float:
    vals = [iou_map[c] for c in classes if c in iou_map]
    return float(np.mean(vals)) if vals else 0.0

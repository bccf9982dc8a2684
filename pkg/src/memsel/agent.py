"""Sample-scoring agent: a three-layer MLP trained on a temporal-difference
objective.

The scorer maps a 3-component state to a replay-effectiveness score in
(0, 1) through two tanh hidden layers and a sigmoid output. A frozen target
copy of the parameters supplies the bootstrap term of the TD error; the
orchestrator refreshes it every ``sync_period`` update steps. All gradients
are computed analytically (no autograd), which keeps the finite-difference
checks honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 3
_PARAM_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class Transition:
    """States of the selected samples at stage t and t+1, with the reward
    observed after training stage t+1."""

    stage: int
    states_t: np.ndarray       # (L, 3)
    states_next: np.ndarray    # (L, 3)
    reward: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class AgentNet:
    def __init__(self, hidden: tuple[int, int] = (16, 16), gamma: float = 0.9,
                 sync_period: int = 10, learning_rate: float = 0.1,
                 momentum: float = 0.9, seed: int = 0):
        if not (0.0 <= gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        h1, h2 = hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 809]))

        def init(n_in, n_out):
            a = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-a, a, size=(n_in, n_out))

        self.params = {
            "W1": init(STATE_DIM, h1), "b1": np.zeros(h1),
            "W2": init(h1, h2), "b2": np.zeros(h2),
            "W3": init(h2, 1), "b3": np.zeros(1),
        }
        self.target = {k: v.copy() for k, v in self.params.items()}
        self._vel = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.gamma = gamma
        self.sync_period = sync_period
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.td_steps = 0

    # -- forward ----------------------------------------------------------

    @staticmethod
    def _forward(params: dict, states: np.ndarray):
        a1 = states @ params["W1"] + params["b1"]
        h1 = np.tanh(a1)
        a2 = h1 @ params["W2"] + params["b2"]
        h2 = np.tanh(a2)
        z = h2 @ params["W3"] + params["b3"]
        q = _sigmoid(z[:, 0])
        return q, (states, h1, h2, z[:, 0])

    def score_batch(self, states: np.ndarray, use_target: bool = False) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if not np.all(np.isfinite(states)):
            raise ValueError("state contains non-finite components")
        params = self.target if use_target else self.params
        return self._forward(params, states)[0]

    def score(self, state, use_target: bool = False) -> float:
        arr = state.as_array() if hasattr(state, "as_array") else np.asarray(state)
        return float(self.score_batch(arr[None, :], use_target)[0])

    def score_input_gradient(self, state) -> np.ndarray:
        """Analytic gradient of the score with respect to the 3 state inputs."""
        arr = state.as_array() if hasattr(state, "as_array") else np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("state contains non-finite components")
        p = self.params
        q, (s, h1, h2, z) = self._forward(p, arr[None, :])
        gz = q[0] * (1.0 - q[0])
        gh2 = gz * p["W3"][:, 0]
        ga2 = (1.0 - h2[0] ** 2) * gh2
        gh1 = p["W2"] @ ga2
        ga1 = (1.0 - h1[0] ** 2) * gh1
        return p["W1"] @ ga1

    # -- TD objective -------------------------------------------------------

    def td_loss(self, transitions: list[Transition]) -> float:
        return self._td(transitions, want_grads=False)[0]

    def td_gradients(self, transitions: list[Transition]) -> dict[str, np.ndarray]:
        return self._td(transitions, want_grads=True)[1]

    def _td(self, transitions: list[Transition], want_grads: bool):
        if not transitions:
            raise ValueError("need at least one transition")
        n = len(transitions)
        deltas = []
        caches = []
        for tr in transitions:
            st = np.atleast_2d(tr.states_t)
            sn = np.atleast_2d(tr.states_next)
            q_cur, cache = self._forward(self.params, st)
            q_next, _ = self._forward(self.target, sn)
            delta = tr.reward + self.gamma * q_next.mean() - q_cur.mean()
            deltas.append(delta)
            caches.append((st, q_cur, cache))
        loss = float(np.mean(np.square(deltas)))
        if not want_grads:
            return loss, None
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        p = self.params
        for delta, (st, q_cur, cache) in zip(deltas, caches):
            L = st.shape[0]
            # d loss / d q_i = 2*delta/n * d delta/d q_i = -2*delta/(n*L)
            gq = np.full(L, -2.0 * delta / (n * L))
            _, h1, h2, z = cache
            gz = gq * q_cur * (1.0 - q_cur)
            grads["W3"] += h2.T @ gz[:, None]
            grads["b3"] += gz.sum(keepdims=True)
            gh2 = gz[:, None] @ p["W3"].T
            ga2 = (1.0 - h2 ** 2) * gh2
            grads["W2"] += h1.T @ ga2
            grads["b2"] += ga2.sum(axis=0)
            gh1 = ga2 @ p["W2"].T
            ga1 = (1.0 - h1 ** 2) * gh1
            grads["W1"] += st.T @ ga1
            grads["b1"] += ga1.sum(axis=0)
        return loss, grads

    def td_step(self, transitions: list[Transition], learning_rate: float | None = None) -> float:
        """One momentum-SGD step on the TD loss; returns the pre-step loss.

        Only the current-parameter branch carries gradient; the target
        branch is a constant.
        """
        lr = self.learning_rate if learning_rate is None else learning_rate
        loss, grads = self._td(transitions, want_grads=True)
        for k in _PARAM_KEYS:
            self._vel[k] *= self.momentum
            self._vel[k] -= lr * grads[k]
            self.params[k] += self._vel[k]
        self.td_steps += 1
        return loss

    def sync_target(self) -> None:
        self.target = {k: v.copy() for k, v in self.params.items()}

    def maybe_sync(self) -> bool:
        """Target refresh on the orchestrator's schedule: every
        ``sync_period`` completed TD steps."""
        if self.sync_period > 0 and self.td_steps > 0 and self.td_steps % self.sync_period == 0:
            self.sync_target()
            return True
        return False

    # -- flat parameter access (finite-difference checks) -------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _PARAM_KEYS])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for k in _PARAM_KEYS:
            n = self.params[k].size
            self.params[k] = flat[pos:pos + n].reshape(self.params[k].shape).copy()
            pos += n

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in _PARAM_KEYS])

    # -- checkpointing -------------------------------------------------------

    def save(self, path: str) -> None:
        data = {f"param_{k}": v for k, v in self.params.items()}
        data.update({f"target_{k}": v for k, v in self.target.items()})
        data.update({f"vel_{k}": v for k, v in self._vel.items()})
        data.update(gamma=np.float64(self.gamma), sync_period=np.int64(self.sync_period),
                    learning_rate=np.float64(self.learning_rate),
                    momentum=np.float64(self.momentum), td_steps=np.int64(self.td_steps))
        np.savez(path, **data)

    @classmethod
    def load(cls, path: str) -> "AgentNet":
        d = np.load(path)
        hidden = (d["param_W1"].shape[1], d["param_W2"].shape[1])
        net = cls(hidden=hidden, gamma=float(d["gamma"]), sync_period=int(d["sync_period"]),
                  learning_rate=float(d["learning_rate"]), momentum=float(d["momentum"]))
        net.params = {k: d[f"param_{k}"].copy() for k in _PARAM_KEYS}
        net.target = {k: d[f"target_{k}"].copy() for k in _PARAM_KEYS}
        net._vel = {k: d[f"vel_{k}"].copy() for k in _PARAM_KEYS}
        net.td_steps = int(d["td_steps"])
        return net

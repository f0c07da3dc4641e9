"""One-hidden-layer tanh perceptron with a softmax head over joint actions.

Joint action ``a`` encodes ``(step index, class)`` k-major:
``a = k_index * n_classes + class``.
"""
import numpy as np

from .kernels import OBS_CLIP

SCALE_FLOOR = 1e-2


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


class RunningNormalizer:
    """Streaming per-dimension mean/variance (Chan et al. pairwise merge)."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        n = batch.shape[0]
        if n == 0:
            return
        bmean = batch.mean(axis=0)
        bm2 = ((batch - bmean) ** 2).sum(axis=0)
        total = self.count + n
        delta = bmean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + bm2 + delta ** 2 * self.count * n / total
        self.count = total

    @property
    def scale(self):
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(np.sqrt(self.m2 / self.count), SCALE_FLOOR)


class MlpPolicy:
    """Categorical policy ``softmax(W2 tanh(W1 z + b1) + b2)``.

    ``z`` is the state standardized by the frozen ``obs_mean``/``obs_scale``
    and clipped to ``[-OBS_CLIP, OBS_CLIP]``. Only the four weight tensors
    are trainable parameters.
    """

    def __init__(self, w1, b1, w2, b2, obs_mean=None, obs_scale=None):
        self.w1 = np.ascontiguousarray(w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(w2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(b2, dtype=np.float64)
        d = self.w1.shape[1]
        self.obs_mean = np.zeros(d) if obs_mean is None else np.ascontiguousarray(obs_mean, dtype=np.float64)
        self.obs_scale = np.ones(d) if obs_scale is None else np.ascontiguousarray(obs_scale, dtype=np.float64)

    @classmethod
    def init(cls, input_dim, n_actions, hidden_units=64, rng=None):
        rng = np.random.default_rng(rng)
        w1 = rng.standard_normal((hidden_units, input_dim)) / np.sqrt(input_dim)
        w2 = rng.standard_normal((n_actions, hidden_units)) / np.sqrt(hidden_units) * 0.01
        return cls(w1, np.zeros(hidden_units), w2, np.zeros(n_actions))

    @classmethod
    def zeros(cls, input_dim, n_actions, hidden_units=64):
        return cls(np.zeros((hidden_units, input_dim)), np.zeros(hidden_units),
                   np.zeros((n_actions, hidden_units)), np.zeros(n_actions))

    @property
    def input_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_units(self):
        return self.w1.shape[0]

    @property
    def n_actions(self):
        return self.w2.shape[0]

    @property
    def shapes(self):
        return [self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape]

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes)

    def get_flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def unflatten(self, theta):
        out, i = [], 0
        for s in self.shapes:
            size = int(np.prod(s))
            out.append(theta[i:i + size].reshape(s))
            i += size
        if i != theta.size:
            raise ValueError(f"expected {i} parameters, got {theta.size}")
        return out

    def with_flat(self, theta):
        """Copy of this policy with parameters ``theta`` and the same input normalization."""
        w1, b1, w2, b2 = self.unflatten(np.asarray(theta, dtype=np.float64))
        return MlpPolicy(w1.copy(), b1.copy(), w2.copy(), b2.copy(),
                         self.obs_mean.copy(), self.obs_scale.copy())

    def copy(self):
        return self.with_flat(self.get_flat())

    def set_normalization(self, mean, scale):
        self.obs_mean = np.ascontiguousarray(mean, dtype=np.float64)
        self.obs_scale = np.ascontiguousarray(scale, dtype=np.float64)

    # --- forward / backward -------------------------------------------------

    def _check(self, S):
        if S.shape[-1] != self.input_dim:
            raise ValueError(f"state dimension {S.shape[-1]} != policy input {self.input_dim}")

    def _forward(self, S):
        z = np.clip((S - self.obs_mean) / self.obs_scale, -OBS_CLIP, OBS_CLIP)
        h = np.tanh(z @ self.w1.T + self.b1)
        logits = h @ self.w2.T + self.b2
        return z, h, logits

    def logits_batch(self, S):
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        self._check(S)
        return self._forward(S)

    def forward(self, state):
        """Action distribution for one state."""
        state = np.asarray(state, dtype=np.float64)
        self._check(state)
        return softmax(self._forward(state[None, :])[2])[0]

    def forward_batch(self, S):
        return softmax(self.logits_batch(S)[2])

    def log_probs_batch(self, S):
        return log_softmax(self.logits_batch(S)[2])

    def _backward(self, z, h, g_logits):
        """Parameter gradient (flat) of ``sum(g_logits * logits)``."""
        gw2 = g_logits.T @ h
        gb2 = g_logits.sum(axis=0)
        gpre = (g_logits @ self.w2) * (1.0 - h ** 2)
        gw1 = gpre.T @ z
        gb1 = gpre.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def log_prob_and_grad(self, state, action):
        """``log pi(action | state)`` and its gradient w.r.t. all parameters."""
        z, h, logits = self.logits_batch(state)
        lp = log_softmax(logits)
        g = -np.exp(lp)
        g[0, action] += 1.0
        return float(lp[0, action]), self._backward(z, h, g)

    def grad_weighted_log_prob(self, S, actions, weights):
        """Gradient of ``sum_i weights[i] * log pi(actions[i] | S[i])``."""
        z, h, logits = self.logits_batch(S)
        p = softmax(logits)
        g = -p * weights[:, None]
        g[np.arange(len(actions)), actions] += weights
        return self._backward(z, h, g)

    def logits_jvp(self, S, v, cache=None):
        """Directional derivative of the logits along parameter direction ``v``.

        ``cache`` is the ``(z, h, logits)`` triple from :meth:`logits_batch`
        for ``S``, to skip recomputing the forward pass.
        """
        z, h, _ = self.logits_batch(S) if cache is None else cache
        dw1, db1, dw2, db2 = self.unflatten(v)
        dh = (z @ dw1.T + db1) * (1.0 - h ** 2)
        return dh @ self.w2.T + h @ dw2.T + db2

    def logits_vjp(self, S, g_logits, cache=None):
        z, h, _ = self.logits_batch(S) if cache is None else cache
        return self._backward(z, h, g_logits)

    # --- checkpoint files ---------------------------------------------------

    def save(self, path, header=None):
        """Write architecture header, normalization and flat parameters as text.

        ``header`` entries are stored as extra ``key value`` lines and handed
        back by :meth:`load`.
        """
        with open(path, "w") as fh:
            fh.write("# rlseg-mlp-policy v1\n")
            fh.write(f"input_dim {self.input_dim}\n")
            fh.write(f"hidden_units {self.hidden_units}\n")
            fh.write(f"n_actions {self.n_actions}\n")
            fh.write("activation tanh\n")
            for key, val in (header or {}).items():
                if isinstance(val, (list, tuple)):
                    val = " ".join(str(v) for v in val)
                fh.write(f"{key} {val}\n")
            fh.write("obs_mean " + " ".join(repr(float(v)) for v in self.obs_mean) + "\n")
            fh.write("obs_scale " + " ".join(repr(float(v)) for v in self.obs_scale) + "\n")
            theta = self.get_flat()
            fh.write(f"params {theta.size}\n")
            fh.write("\n".join(repr(float(v)) for v in theta) + "\n")

    @classmethod
    def load(cls, path):
        """Return ``(policy, header)`` from a checkpoint written by :meth:`save`."""
        header = {}
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("# rlseg-mlp-policy"):
            raise ValueError(f"{path}: not a policy checkpoint")
        i = 1
        while i < len(lines):
            key, _, rest = lines[i].partition(" ")
            i += 1
            if key == "params":
                n = int(rest)
                theta = np.array([float(v) for v in lines[i:i + n]])
                break
            header[key] = rest
        else:
            raise ValueError(f"{path}: missing parameter block")
        d, hdim, a = int(header["input_dim"]), int(header["hidden_units"]), int(header["n_actions"])
        pol = cls.zeros(d, a, hdim)
        pol = pol.with_flat(theta)
        pol.set_normalization(np.array(header.pop("obs_mean").split(), dtype=np.float64),
                              np.array(header.pop("obs_scale").split(), dtype=np.float64))
        return pol, header


def sample(dist, rng) -> int:
    """Draw an action index from a categorical distribution."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(dist), u, side="right"))
    return min(idx, len(dist) - 1)


def mode(dist) -> int:
    """Most probable action; ties go to the lowest index."""
    return int(np.argmax(dist))


def kl_divergence(old: MlpPolicy, new: MlpPolicy, states) -> float:
    """Mean over ``states`` of KL(old || new)."""
    lp_old = old.log_probs_batch(states)
    lp_new = new.log_probs_batch(states)
    return float(np.mean(np.sum(np.exp(lp_old) * (lp_old - lp_new), axis=1)))

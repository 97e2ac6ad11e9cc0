"""Independent reference computations used as test oracles."""
import math

import numpy as np

from fedbss import nn

# criterion name -> (passed, detail); filled by test_acceptance.py, printed by conftest
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def py_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def mean_loss_fn(model, batch, labels):
    def f(params):
        logits = nn.forward(model.with_params(params), batch).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(labels)), labels].mean())
    return f


def decision_pattern(model, params, batch):
    """ReLU on/off masks and max-pool winners along the forward pass."""
    x = np.asarray(batch, dtype=params.dtype)
    pattern = []
    for i, layer in enumerate(model.architecture):
        x, cache = layer.forward(model._views(i, params), x)
        if isinstance(layer, (nn.Dense, nn.Conv2D)) and layer.activation == "relu":
            pattern.append(cache[-1] > 0)
        elif isinstance(layer, nn.MaxPool2D):
            pattern.append(cache[1])
    return pattern


def finite_difference_check(model, batch, labels, n_coords=20, step=1e-4, seed=0):
    """Max relative error of backprop vs central differences on random coordinates.

    The model is promoted to float64 so the difference quotient is meaningful.
    Coordinates whose +-step perturbation flips a ReLU gate or a max-pool winner
    sit on a kink where the loss is not differentiable; those are replaced by
    fresh random coordinates.
    """
    params = model.params.astype(np.float64)
    m64 = model.with_params(params)
    analytic = nn.backward(m64, batch, labels).flat
    f = mean_loss_fn(m64, batch, labels)
    rng = np.random.default_rng(seed)
    candidates = rng.permutation(params.total_len)
    worst, checked = 0.0, 0
    for c in candidates:
        plus, minus = params.copy(), params.copy()
        plus.flat[c] += step
        minus.flat[c] -= step
        pat_p, pat_m = decision_pattern(m64, plus, batch), decision_pattern(m64, minus, batch)
        if any(not np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
            continue
        numeric = (f(plus) - f(minus)) / (2 * step)
        denom = max(abs(numeric), abs(analytic[c]), 1e-8)
        worst = max(worst, abs(numeric - analytic[c]) / denom)
        checked += 1
        if checked == n_coords:
            break
    assert checked == min(n_coords, params.total_len), "not enough kink-free coordinates"
    return worst


def gradcheck_models(seed):
    """One small model per layer type (dense, relu, conv, max-pool, flatten, reshape)."""
    rng = np.random.default_rng(seed)
    models = {
        "dense": (nn.Model([nn.Dense(5, 3)], (5,), seed=seed), rng.normal(size=(4, 5))),
        "mlp_relu": (nn.mlp((6,), 4, hidden=8, seed=seed), rng.normal(size=(5, 6))),
        "conv_pool": (
            nn.Model([nn.Reshape((1, 8, 8)), nn.Conv2D(1, 2, 3, 1, "relu"), nn.MaxPool2D(2),
                      nn.Conv2D(2, 3, 3), nn.MaxPool2D(2, 1), nn.Flatten(), nn.Dense(3, 5, "relu"),
                      nn.Dense(5, 3)], (8, 8), seed=seed),
            rng.normal(size=(3, 8, 8)),
        ),
        "cnn_zoo": (nn.cnn((12, 12), 3, channels=(2, 3), hidden=6, seed=seed), rng.normal(size=(2, 12, 12))),
    }
    out = {}
    for name, (model, x) in models.items():
        labels = rng.integers(0, model.num_classes, size=x.shape[0])
        out[name] = (model, x, labels)
    return out

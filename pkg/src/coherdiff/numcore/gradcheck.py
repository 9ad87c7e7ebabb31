"""Central finite-difference verification of tape gradients."""
import numpy as np

from coherdiff.errors import EvaluationError, ParameterError
from coherdiff.numcore.tensor import GradTape


def _scalar(value):
    value = float(np.asarray(getattr(value, "data", value)).reshape(()))
    if not np.isfinite(value):
        raise EvaluationError(f"loss evaluated to {value}")
    return value


def grad_errors(f, params, step=1e-5, max_entries=None, seed=0):
    """Per-parameter worst relative error between tape and numeric gradients.

    ``f`` is a zero-argument callable returning a scalar tensor and reading
    the tensors in ``params`` (name -> Tensor). The relative error of one
    entry is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_entries`` set, each parameter is probed at that many seeded random
    entries instead of every entry.
    """
    for name, tensor in params.items():
        if tensor.dtype != np.float64:
            raise ParameterError(f"grad_check needs 64-bit parameters; {name} is {tensor.dtype}")
    with GradTape() as tape:
        tape.watch(params)
        loss = f()
        _scalar(loss)
    analytic = tape.gradient(loss)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        grad = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = _scalar(f())
            flat[i] = orig - step
            minus = _scalar(f())
            flat[i] = orig
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(numeric)))
        errors[name] = worst
    return errors


def grad_check(f, params, step=1e-5, max_entries=None, seed=0):
    """Maximum over :func:`grad_errors`; 0.0 for an empty parameter set."""
    errors = grad_errors(f, params, step=step, max_entries=max_entries, seed=seed)
    return max(errors.values(), default=0.0)

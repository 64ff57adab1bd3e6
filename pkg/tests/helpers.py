"""Finite-difference utilities shared by the gradient tests."""
import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def grad_matches(analytic, fd, rel: float = 1e-4, zero: float = 1e-7) -> bool:
    """Relative agreement, or agreement at zero for gradients that vanish identically
    (e.g. the bias of a layer followed by normalization)."""
    if np.max(np.abs(fd)) < zero and np.max(np.abs(analytic)) < zero:
        return True
    return rel_error(analytic, fd) < rel


# acceptance verdicts, printed as one line each at the end of the run
VERDICTS: dict[int, tuple[bool, str]] = {}


def verdict(number: int, ok: bool, detail: str = "") -> str:
    VERDICTS[number] = (bool(ok), detail)
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
    print(line)
    return line

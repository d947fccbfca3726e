import numpy as np


def soft_threshold(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def lasso_cd(X, y, lam, max_iters=1000, tol=1e-8):
    """Cyclic coordinate descent for (1/2n)||y - Xb||^2 + lam*||b||_1.

    Columns of ``X`` must be standardized (mean 0, mean square 1) and ``y``
    centred, so each coordinate update is a plain soft-threshold.
    Returns ``(coef, n_iters)``.
    """
    n, p = X.shape
    beta = np.zeros(p)
    r = y.astype(float).copy()
    scale = max(np.abs(y).max(), 1e-300)
    it = 0
    for it in range(1, max_iters + 1):
        max_step = 0.0
        for j in range(p):
            xj = X[:, j]
            old = beta[j]
            rho = xj @ r / n + old
            new = soft_threshold(rho, lam)
            if new != old:
                r -= xj * (new - old)
                beta[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step <= tol * scale:
            break
    return beta, it


def fit_lasso(X, y, lam, max_iters=1000, tol=1e-8) -> dict:
    """Lasso on standardized features; coefficients returned on the raw scale.

    Zero-variance columns are excluded and get a zero coefficient.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    active = std > 1e-12 * np.maximum(np.abs(mean), 1.0)
    coef = np.zeros(X.shape[1])
    y_mean = y.mean()
    n_iters = 0
    if active.any():
        Z = (X[:, active] - mean[active]) / std[active]
        beta, n_iters = lasso_cd(Z, y - y_mean, lam, max_iters, tol)
        coef[active] = beta / std[active]
    intercept = y_mean - coef @ mean
    return {"intercept": float(intercept), "coef": coef.tolist(), "n_iters": n_iters}


def predict_lasso(model: dict, X) -> np.ndarray:
    return np.asarray(X, dtype=float) @ np.asarray(model["coef"]) + model["intercept"]

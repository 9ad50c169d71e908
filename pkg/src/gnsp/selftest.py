"""Built-in invariant self-test: projector algebra, null-space exactness,
gradient checks against finite differences, and the output-invariance
theorem on a miniature two-task run.

Every check prints its numeric residual next to its bound, one line per
check, and the suite passes only if every residual is inside its bound.
`perturb="projector"` is a negative-control hook: it corrupts one projector
entry before the algebra checks, which must then fail on idempotence.
"""

from __future__ import annotations

import numpy as np

from .encoder import Gradients, forward
from .linalg import frobenius_norm, kl_rows, softmax_rows, sym_eig
from .losses import LossWeights, cd_loss, classification_loss, map_loss, total_loss
from .projection import (
    GramAccumulator,
    accumulate,
    build_projector,
    gram_from_activations,
    project_update,
)
from .tasks import make_reference_set, make_task
from .trainer import (
    Method,
    TrainerConfig,
    make_default_dual_encoder,
    make_initial_state,
    train_task,
)


class _Check:
    def __init__(self, group: str, name: str, residual: float, bound: float):
        self.group = group
        self.name = name
        self.residual = residual
        self.bound = bound
        self.passed = residual <= bound

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.group}/{self.name}: residual {self.residual:.3e} (bound {self.bound:.1e})"


def _projector_algebra(checks: list[_Check], perturb: str | None) -> None:
    rng = np.random.default_rng(11)
    sym_res = idem_res = trace_res = eig_res = 0.0
    for trial in range(40):
        d = int(rng.integers(2, 65))
        acc = GramAccumulator([np.zeros((d, d))], 0, [d], [0])
        for _ in range(int(rng.integers(1, 4))):
            rank = int(rng.integers(1, d + 1))
            x = rng.standard_normal((rank, d))
            acc = accumulate(acc, [gram_from_activations(x)])
        proj = build_projector(acc, float(rng.uniform(0.0, 0.4)))
        p = proj.per_layer[0]
        if perturb == "projector" and trial == 0:
            p = p.copy()
            p[0, 0] += 1e-3
        sym_res = max(sym_res, float(np.max(np.abs(p - p.T))))
        idem_res = max(idem_res, frobenius_norm(p @ p - p))
        trace_res = max(trace_res, abs(float(np.trace(p)) - proj.null_dims[0]))
        eig = np.linalg.eigvalsh(0.5 * (p + p.T))
        eig_res = max(eig_res, float(np.max(np.minimum(np.abs(eig), np.abs(eig - 1.0)))))
    checks.append(_Check("projector_algebra", "symmetry", sym_res, 1e-8))
    checks.append(_Check("projector_algebra", "idempotence", idem_res, 1e-8))
    checks.append(_Check("projector_algebra", "trace_vs_null_dim", trace_res, 1e-6))
    checks.append(_Check("projector_algebra", "eigenvalues_01", eig_res, 1e-6))


def _null_space_exactness(checks: list[_Check]) -> None:
    rng = np.random.default_rng(12)
    worst = 0.0
    dims_ok = True
    for _ in range(25):
        d = int(rng.integers(4, 33))
        r = int(rng.integers(1, d))
        x = rng.standard_normal((r + 5, r)) @ rng.standard_normal((r, d))
        acc = accumulate(
            GramAccumulator([np.zeros((d, d))], 0, [d], [0]),
            [gram_from_activations(x)],
        )
        proj = build_projector(acc, 0.0)
        if proj.null_dims[0] != d - np.linalg.matrix_rank(x):
            dims_ok = False
        g = rng.standard_normal((d, int(rng.integers(1, 8))))
        projected = project_update(proj, Gradients([g])).d_weight[0]
        denom = frobenius_norm(x) * max(frobenius_norm(projected), 1e-300)
        worst = max(worst, frobenius_norm(x @ projected) / denom)
    checks.append(_Check("null_space", "X_P_G_residual", worst, 1e-8))
    checks.append(_Check("null_space", "null_dim_equals_d_minus_rank", 0.0 if dims_ok else 1.0, 0.5))


def _gradient_checks(checks: list[_Check]) -> None:
    rng = np.random.default_rng(13)
    eps = 1e-5

    def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
        scale = np.maximum(np.abs(numeric), 1e-6)
        return float(np.max(np.abs(analytic - numeric) / scale))

    def fd(f, x):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            up = f()
            x[idx] = orig - eps
            down = f()
            x[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        return g

    worst = {"ce": 0.0, "cd": 0.0, "map": 0.0, "combined": 0.0}
    for _ in range(5):
        b, c, d = 4, 3, 5
        img = rng.standard_normal((b, d))
        txt = rng.standard_normal((c, d))
        labels = rng.integers(0, c, b)
        out = classification_loss(img, txt, labels, 0.3)
        worst["ce"] = max(
            worst["ce"],
            rel_err(out.d_image_embeddings, fd(lambda: classification_loss(img, txt, labels, 0.3).value, img)),
            rel_err(out.d_text_embeddings, fd(lambda: classification_loss(img, txt, labels, 0.3).value, txt)),
        )
        t_img = rng.standard_normal((b, d))
        t_txt = rng.standard_normal((b, d))
        s_img = rng.standard_normal((b, d))
        s_txt = rng.standard_normal((b, d))
        out = cd_loss(t_img, t_txt, s_img, s_txt, 0.6)
        worst["cd"] = max(
            worst["cd"],
            rel_err(out.d_image_embeddings, fd(lambda: cd_loss(t_img, t_txt, s_img, s_txt, 0.6).value, s_img)),
        )
        out = map_loss(s_img, s_txt, 0.6)
        worst["map"] = max(
            worst["map"],
            rel_err(out.d_image_embeddings, fd(lambda: map_loss(s_img, s_txt, 0.6).value, s_img)),
        )
        weights = LossWeights(lambda_cd=1.0, beta_map=0.75)

        def combined_value() -> float:
            labels_b = np.arange(b)
            return total_loss(
                classification_loss(s_img, s_txt, labels_b, 0.6),
                cd_loss(t_img, t_txt, s_img, s_txt, 0.6),
                map_loss(s_img, s_txt, 0.6),
                weights,
            ).value

        combined = total_loss(
            classification_loss(s_img, s_txt, np.arange(b), 0.6),
            cd_loss(t_img, t_txt, s_img, s_txt, 0.6),
            map_loss(s_img, s_txt, 0.6),
            weights,
        )
        worst["combined"] = max(
            worst["combined"], rel_err(combined.d_image_embeddings, fd(combined_value, s_img))
        )
    for name, value in worst.items():
        checks.append(_Check("gradient_checks", name, value, 1e-4))


def _output_invariance(checks: list[_Check]) -> None:
    ref = make_reference_set(seed=50, size=64, d_image_in=8, d_text_in=6)
    t1_train, _ = make_task(seed=51, n_classes=3, n_per_class=20, d_image_in=8, d_text_in=6, separation=6.0)
    t2_train, _ = make_task(seed=52, n_classes=3, n_per_class=20, d_image_in=8, d_text_in=6, separation=6.0)
    cfg = TrainerConfig(
        iterations_per_task=80,
        batch_size=16,
        learning_rate=0.05,
        rho=0.0,
        method=Method.GNSP_ONLY,
        seed=3,
        capture_cap=6,
    )
    enc = make_default_dual_encoder(8, 6, 3, image_hidden=(12,), text_hidden=(8,), embed_dim=6)
    state = make_initial_state(enc, cfg, reference=ref)
    state = train_task(state, t1_train, ref, cfg)
    probe = t1_train.images[: cfg.capture_cap]
    _, trace_before = forward(state.model.image_encoder, probe, capture=True)
    state = train_task(state, t2_train, ref, cfg)
    _, trace_after = forward(state.model.image_encoder, probe, capture=True)
    drift = max(
        float(np.max(np.abs(a - b)))
        for a, b in zip(trace_before.preactivations, trace_after.preactivations)
    )
    checks.append(_Check("output_invariance", "probe_layer_outputs", drift, 1e-8))


def _kernel_properties(checks: list[_Check]) -> None:
    rng = np.random.default_rng(14)
    # softmax shift invariance, bit for bit, on exactly-representable shifts
    rows = rng.integers(-8, 9, size=(30, 6)).astype(np.float64)
    shifted = rows + 256.0
    shift_res = float(np.max(np.abs(softmax_rows(rows) - softmax_rows(shifted))))
    checks.append(_Check("kernel", "softmax_shift_invariance", shift_res, 0.0))
    worst_kl = 0.0
    for _ in range(200):
        p = rng.standard_normal((3, 5))
        q = rng.standard_normal((3, 5))
        worst_kl = min(worst_kl, kl_rows(p, q))
    checks.append(_Check("kernel", "kl_nonnegative", -worst_kl, 0.0))
    worst_recon = 0.0
    for _ in range(30):
        d = int(rng.integers(2, 20))
        x = rng.standard_normal((d + 2, d))
        m = x.T @ x
        s = sym_eig(m)
        recon = frobenius_norm(s.vectors @ np.diag(s.values) @ s.vectors.T - m)
        worst_recon = max(worst_recon, recon / max(1.0, frobenius_norm(m)))
    checks.append(_Check("kernel", "eig_reconstruction", worst_recon, 1e-8))


def run_selftest(perturb: str | None = None, *, printer=print) -> int:
    """Run all invariant groups; returns 0 iff every check passes."""
    checks: list[_Check] = []
    _projector_algebra(checks, perturb)
    _null_space_exactness(checks)
    _gradient_checks(checks)
    _output_invariance(checks)
    _kernel_properties(checks)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        printer(c.line())
    if failed:
        printer(f"{len(failed)} of {len(checks)} checks failed: "
                + ", ".join(f"{c.group}/{c.name}" for c in failed))
        return 1
    printer(f"all {len(checks)} checks passed")
    return 0

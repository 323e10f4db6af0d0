"""Self-contained property checks, runnable from the CLI.

Each check pits an implementation against an independently coded oracle
(brute-force double loops, finite differences, closed forms) and returns
a named pass/fail result. The mask check takes the mask builder as an
argument so a deliberately corrupted builder can serve as a negative
control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .decoder import Decoder, DecoderConfig, build_mask
from .objective import build_targets, next_cluster_loss, normalize_target
from .patching import Geometry, image_to_clusters
from .separator import SeparatorSpec, layout_plan, make_separator, pack
from .ssm import Encoder, EncoderConfig, SSMParams, kernel_conv, scan_recurrent
from .training import grad_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _result(name, passed, detail) -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), detail=detail)


def check_scan_kernel_equivalence(seed: int = 0, instances: int = 100) -> CheckResult:
    """Recurrent scan vs convolution-kernel evaluation on random stable LTI systems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_seed = -1
    for k in range(instances):
        d = int(rng.integers(1, 9))
        length = int(rng.integers(2, 65))
        params = SSMParams(
            a=-np.exp(rng.normal(0.0, 1.0, d)),
            b=rng.normal(0.0, 1.0, d),
            c=rng.normal(0.0, 1.0, d),
            delta=float(np.exp(rng.uniform(np.log(1e-3), np.log(0.5)))),
        )
        x = rng.normal(0.0, 1.0, length)
        ys = scan_recurrent(params, x)
        yk = kernel_conv(params, x)
        rel = np.max(np.abs(ys - yk)) / (np.max(np.abs(ys)) + 1e-12)
        if rel > worst:
            worst, worst_seed = rel, k
    return _result(
        "scan_kernel_equivalence",
        worst < 1e-5,
        f"max rel deviation {worst:.3e} (instance {worst_seed}) over {instances} systems",
    )


def _tiny_packed(seed: int, n_images: int = 2, embed_dim: int = 16):
    geom = Geometry(image_size=8, patch_size=2, cluster_side=2, channels=1)
    rng = np.random.default_rng(seed)
    images = [
        rng.random((8, 8, 1), dtype=np.float64).astype(np.float32)
        for _ in range(n_images)
    ]
    spec = SeparatorSpec("identity", geom.cluster_side, embed_dim)
    return geom, pack([image_to_clusters(im, geom) for im in images], spec, "sc")


def check_one_scan_causality(seed: int = 0, positions: int = 20) -> CheckResult:
    """Perturbing later tokens must leave earlier features bit-identical."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    _, packed = _tiny_packed(seed)
    enc = Encoder(
        EncoderConfig(
            width=16, depth=2, state_dim=4, patch_dim=packed.patch_dim,
            max_positions=64, separator_kind="identity",
        )
    )
    with torch.no_grad():
        base = enc.encode(packed)
    total = packed.num_tokens
    per_image = total // packed.num_images
    rng = np.random.default_rng(seed + 1)

    # whole-image perturbation: rewrite every image-2 pixel token
    packed.pixel_values[per_image:] += rng.normal(1.0, 1.0, packed.pixel_values[per_image:].shape).astype(np.float32)
    with torch.no_grad():
        pert = enc.encode(packed)
    if not torch.equal(base[:per_image], pert[:per_image]):
        return _result("one_scan_causality", False, "image-1 features changed")

    for _ in range(positions):
        _, packed = _tiny_packed(seed)
        # separators are content-independent, so perturb a pixel token
        pix = np.flatnonzero(~packed.is_separator)
        j = int(rng.choice(pix[pix > 0]))
        t = int(rng.integers(0, j))
        with torch.no_grad():
            ref = enc.encode(packed)
        packed.pixel_values[j] += 1.0
        with torch.no_grad():
            out = enc.encode(packed)
        if not torch.equal(ref[: t + 1], out[: t + 1]):
            return _result(
                "one_scan_causality", False, f"prefix <= {t} changed by token {j}"
            )
    return _result(
        "one_scan_causality", True,
        f"prefixes bit-identical under suffix perturbation ({positions} trials)",
    )


def _mask_cases():
    for n in (1, 2):
        for length in (1, 9):
            for side in (1, 4):
                for layout in ("sc", "cs", "scs", "csc"):
                    if layout in ("scs", "csc") and length % side != 0:
                        continue  # group size must divide the cluster count
                    yield n, length, side, layout


def check_mask_oracle(mask_fn=build_mask) -> CheckResult:
    """build_mask against the exhaustive <=-rule double loop, all layouts."""
    for n, length, side, layout in _mask_cases():
        plan = layout_plan(layout, length, side)
        ids = []
        g = 0
        for _ in range(n):
            for _ in plan:
                ids.extend([g] * (side * side))
                g += 1
        ids = np.array(ids, dtype=np.int64)
        got = mask_fn(ids).allow
        t = ids.shape[0]
        for q in range(t):
            for k in range(t):
                want = ids[k] <= ids[q]
                if got[q, k] != want:
                    return _result(
                        "mask_oracle", False,
                        f"(N={n} L={length} side={side} {layout}) "
                        f"allow[{q}][{k}] = {got[q, k]}, want {want}",
                    )
    return _result("mask_oracle", True, "matches the <=-rule on every tested layout")


def check_decoder_causality(seed: int = 0) -> CheckResult:
    """Perturbing later-cluster features changes no earlier prediction."""
    torch.manual_seed(seed)
    dec = Decoder(DecoderConfig(layers=1, width=16, heads=2, feature_dim=8, patch_dim=4))
    ids = np.repeat(np.arange(4), 3)
    feats = torch.randn(12, 8)
    with torch.no_grad():
        base = dec.decode(feats, ids)
        pert = feats.clone()
        pert[ids >= 2] += 1.0
        out = dec.decode(pert, ids)
    early = ids < 2
    ok = torch.equal(base[early], out[early])
    return _result(
        "decoder_causality", ok,
        "earlier predictions unchanged" if ok else "leak across the mask",
    )


def check_gradcheck_micro(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Analytic gradients of a miniature full pretraining graph vs central FD.

    Step size 1e-5: at 1e-4 the difference quotient's own truncation error
    reaches the tolerance through the softplus/exp curvature.
    """
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    _, packed = _tiny_packed(seed, n_images=1, embed_dim=4)
    enc = Encoder(
        EncoderConfig(
            width=4, depth=1, state_dim=2, mlp_ratio=2,
            patch_dim=packed.patch_dim, max_positions=32, separator_kind="identity",
        )
    ).double()
    dec = Decoder(
        DecoderConfig(layers=1, width=4, heads=1, feature_dim=4,
                      patch_dim=packed.patch_dim, mlp_ratio=2)
    ).double()
    plan = build_targets(packed)

    def loss_fn():
        feats = enc.encode(packed)
        preds = dec.decode(feats, packed.cluster_index)
        return next_cluster_loss(preds, plan)

    params = {f"encoder.{n}": p for n, p in enc.named_parameters()}
    params.update({f"decoder.{n}": p for n, p in dec.named_parameters()})
    report = grad_check(loss_fn, params, eps=1e-5, tol=tol)
    return _result(
        "gradcheck_micro", report.passed,
        f"max rel err {report.max_rel_err:.3e} over {len(report.per_param)} tensors",
    )


def check_normalization_identities(seed: int = 0) -> CheckResult:
    # scale factors stay in [0.5, 2]: away from that the epsilon guard in
    # the normalizer visibly breaks the exact algebraic identity
    rng = np.random.default_rng(seed)
    for _ in range(50):
        p = rng.normal(0.0, 2.0, 16)
        a = float(rng.uniform(0.5, 2.0))
        b = float(rng.normal(0, 5))
        if np.abs(normalize_target(a * p + b) - normalize_target(p)).max() > 1e-5:
            return _result("normalization_identities", False, "shift/scale variance")
    const = normalize_target(np.full(16, 0.7))
    if np.abs(const).max() >= 1e-2:
        return _result(
            "normalization_identities", False,
            f"constant patch maps to {np.abs(const).max():.3e}",
        )
    return _result(
        "normalization_identities", True,
        "shift/scale invariant within 1e-5; constant patch below 1e-2",
    )


def check_separator_structure() -> CheckResult:
    ident = make_separator(SeparatorSpec("identity", 4, 8))
    ones_rows = sorted(np.flatnonzero(ident.sum(axis=1) > 0).tolist())
    if ones_rows != [0, 5, 10, 15]:
        return _result("separator_structure", False, f"identity ones at {ones_rows}")
    if not (np.all(ident[ones_rows] == 1.0) and np.all(np.delete(ident, ones_rows, 0) == 0.0)):
        return _result("separator_structure", False, "identity values off the 0/1 grid")
    zeros = make_separator(SeparatorSpec("zeros", 4, 8))
    ones = make_separator(SeparatorSpec("ones", 4, 8))
    ok = np.all(zeros == 0.0) and np.all(ones == 1.0)
    return _result(
        "separator_structure", ok,
        "identity diagonal + zeros/ones exact" if ok else "zeros/ones not constant",
    )


def check_packing_arithmetic() -> CheckResult:
    geom = Geometry(image_size=192, patch_size=16, cluster_side=4, channels=3)
    blank = image_to_clusters(np.zeros((192, 192, 3), dtype=np.float32), geom)
    spec = SeparatorSpec("identity", 4, 8)
    per_image = pack([blank], spec, "sc").num_tokens
    if per_image != 160:
        return _result("packing_arithmetic", False, f"{per_image} tokens per image")
    for n, want in ((1, 160), (2, 320), (4, 640), (8, 1280), (16, 2560)):
        got = pack([blank] * n, spec, "sc").num_tokens
        if got != want:
            return _result("packing_arithmetic", False, f"N={n}: {got} != {want}")
    return _result("packing_arithmetic", True, "160/image; totals 160..2560 exact")


def run_all(seed: int = 0, mask_fn=build_mask) -> list[CheckResult]:
    checks = (
        lambda: check_scan_kernel_equivalence(seed),
        lambda: check_one_scan_causality(seed),
        lambda: check_mask_oracle(mask_fn),
        lambda: check_decoder_causality(seed),
        lambda: check_gradcheck_micro(seed),
        lambda: check_normalization_identities(seed),
        check_separator_structure,
        check_packing_arithmetic,
    )
    results = []
    for fn in checks:
        try:
            results.append(fn())
        except Exception as e:  # a crash is a failure, not a suite abort
            name = getattr(fn, "__name__", "anonymous")
            results.append(CheckResult(name=name, passed=False, detail=repr(e)))
    return results

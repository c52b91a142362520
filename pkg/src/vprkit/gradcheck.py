"""Named finite-difference checks covering every analytic backward pass.

Each case builds a small random instance, wraps its free inputs as
parameters, and exposes a scalar function whose side effect fills the
analytic gradients; `finite_diff_check` probes every coordinate. Discrete
choices (pair mining) are frozen at the base point, and Sinkhorn runs a
fixed iteration count, so every checked map is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import aggregation as agg
from . import fusion as fus
from .fusion import FusionParams, Source, TokenSet
from .loss import MsParams, mine_pairs, ms_loss, similarity_matrix
from .model import DescriptorModel, ModelConfig
from .tensor import Parameter, finite_diff_check

PASS_THRESHOLD = 1e-3


@dataclass
class GradCase:
    f: Callable[[], float]
    params: list[Parameter]


def _token_set(values: np.ndarray, source: Source, image_id: str = "img") -> TokenSet:
    return TokenSet(values, source, image_id, (1, values.shape[0]))


def _fusion_case(variant: str, seed: int, adapter: bool = False) -> GradCase:
    rng = np.random.default_rng([seed, fus.VARIANTS.index(variant), int(adapter)])
    m, d = 3, 4
    clip_dim = 6 if adapter else None
    p = FusionParams.create(d, variant, clip_dim=clip_dim, rng=rng)
    x_d = Parameter("x_d", rng.standard_normal((m, d)))
    x_c = Parameter("x_c", rng.standard_normal((m, clip_dim if adapter else d)))
    w_fix = rng.standard_normal((m, d))
    params = [x_d, x_c] + p.trainable()

    def f() -> float:
        for q in params:
            q.zero_grad()
        fused, cache = fus.fuse(
            _token_set(x_d.value, Source.FUSED), _token_set(x_c.value, Source.FUSED), p
        )
        d_xd, d_xc = fus.fusion_backward(p, cache, w_fix)
        x_d.add_grad(d_xd)
        x_c.add_grad(d_xc)
        return float(np.sum(fused.tokens * w_fix))

    return GradCase(f=f, params=params)


def _aggregation_case(aggregation: str, assignment: str, seed: int) -> GradCase:
    rng = np.random.default_rng([seed, len(aggregation), len(assignment)])
    m, d, s = 6, 5, 3
    tokens = Parameter("tokens", rng.standard_normal((m, d)))
    queries = Parameter("queries", rng.standard_normal((s, d)))
    w_fix = rng.standard_normal((s, d))
    params = [tokens, queries]

    def f() -> float:
        for q in params:
            q.zero_grad()
        scores = agg.similarity_scores(tokens.value, queries.value)
        if assignment == "softmax":
            asn = agg.assign_softmax(scores)
        else:
            asn = agg.assign_sinkhorn(scores, iters=8, tol=0.0)
        if aggregation == "vlaq":
            v = agg.aggregate_vlaq(tokens.value, queries.value, asn.alpha)
            d_tok, d_q, d_alpha = agg.vlaq_backward(w_fix, tokens.value, queries.value, asn.alpha)
        else:
            v = agg.aggregate_boq(tokens.value, asn.alpha)
            d_tok, d_alpha = agg.boq_backward(w_fix, tokens.value, asn.alpha)
            d_q = np.zeros_like(queries.value)
        if assignment == "softmax":
            d_scores = agg.softmax_assignment_backward(d_alpha, asn.alpha)
        else:
            d_scores = agg.sinkhorn_backward(d_alpha, asn.aux)
        d_tok_s, d_q_s = agg.scores_backward(d_scores, tokens.value, queries.value)
        tokens.add_grad(d_tok + d_tok_s)
        queries.add_grad(d_q + d_q_s)
        return float(np.sum(v * w_fix))

    return GradCase(f=f, params=params)


def _descriptor_case(seed: int, project: bool) -> GradCase:
    rng = np.random.default_rng([seed, 7, int(project)])
    s, d, blocks = 4, 6, 2
    residuals = [Parameter(f"block{i}", rng.standard_normal((s, d))) for i in range(blocks)]
    projection = None
    params = list(residuals)
    if project:
        projection = Parameter("projection", rng.standard_normal((blocks * s * d, 5)))
        params.append(projection)
    out_dim = 5 if project else blocks * s * d
    w_fix = rng.standard_normal(out_dim)

    def f() -> float:
        for q in params:
            q.zero_grad()
        desc, cache = agg.build_descriptor([r.value for r in residuals], projection)
        d_blocks = agg.descriptor_backward(w_fix, cache, projection)
        for r, db in zip(residuals, d_blocks):
            r.add_grad(db)
        return float(desc.values @ w_fix)

    return GradCase(f=f, params=params)


def _ms_loss_case(seed: int) -> GradCase:
    rng = np.random.default_rng([seed, 11])
    n, dg = 8, 6
    base = rng.standard_normal((n, dg))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    descriptors = Parameter("descriptors", base)
    labels = np.repeat(np.arange(n // 2), 2)
    msp = MsParams()
    frozen = mine_pairs(similarity_matrix(descriptors.value), labels, msp.epsilon_mine)

    def f() -> float:
        descriptors.zero_grad()
        sim = similarity_matrix(descriptors.value)
        loss, d_sim = ms_loss(sim, frozen, msp)
        descriptors.add_grad((d_sim + d_sim.T) @ descriptors.value)
        return float(loss)

    return GradCase(f=f, params=[descriptors])


def _model_case(seed: int) -> GradCase:
    rng = np.random.default_rng([seed, 13])
    m, d = 4, 5
    config = ModelConfig(
        dim=d, fusion="residual", aggregation="vlaq", assignment="softmax",
        blocks=2, queries_per_block=3,
    )
    model = DescriptorModel.create(config, seed=seed)
    labels = ["a", "a", "b", "b"]
    token_pairs = []
    for i in range(4):
        dino = _token_set(rng.standard_normal((m, d)), Source.FUSED, f"img{i}")
        clip = _token_set(rng.standard_normal((m, d)), Source.FUSED, f"img{i}")
        token_pairs.append((dino, clip))
    msp = MsParams()
    params = model.parameters()

    base = np.stack([model.forward(a, b)[0].values for a, b in token_pairs])
    frozen = mine_pairs(similarity_matrix(base), labels, msp.epsilon_mine)

    def f() -> float:
        model.zero_grad()
        rows = []
        caches = []
        for a, b in token_pairs:
            desc, cache = model.forward(a, b)
            rows.append(desc.values)
            caches.append(cache)
        g = np.stack(rows)
        loss, d_sim = ms_loss(similarity_matrix(g), frozen, msp)
        d_g = (d_sim + d_sim.T) @ g
        for i, cache in enumerate(caches):
            model.backward(d_g[i], cache)
        return float(loss)

    return GradCase(f=f, params=params)


CASES: dict[str, Callable[[int], GradCase]] = {
    "fusion-residual": lambda seed: _fusion_case("residual", seed),
    "fusion-residual-adapter": lambda seed: _fusion_case("residual", seed, adapter=True),
    "fusion-add": lambda seed: _fusion_case("add", seed, adapter=True),
    "fusion-film": lambda seed: _fusion_case("film", seed),
    "aggregate-vlaq-softmax": lambda seed: _aggregation_case("vlaq", "softmax", seed),
    "aggregate-boq-softmax": lambda seed: _aggregation_case("boq", "softmax", seed),
    "aggregate-vlaq-sinkhorn": lambda seed: _aggregation_case("vlaq", "sinkhorn", seed),
    "descriptor-normalize": lambda seed: _descriptor_case(seed, project=False),
    "descriptor-projection": lambda seed: _descriptor_case(seed, project=True),
    "ms-loss": lambda seed: _ms_loss_case(seed),
    "model-full": lambda seed: _model_case(seed),
}


def run_case(name: str, seeds=range(5), h: float = 1e-3) -> float:
    worst = 0.0
    for seed in seeds:
        case = CASES[name](seed)
        worst = max(worst, finite_diff_check(case.f, case.params, h=h))
    return worst


def run_battery(seeds=range(5)) -> dict[str, float]:
    return {name: run_case(name, seeds) for name in CASES}

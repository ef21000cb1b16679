"""Config-driven model construction, single runs and ablation sweeps."""
from __future__ import annotations

from typing import Callable, Optional

from .config import SENConfig
from .encoders import build_super_neuron
from .network import SEN, build_sen
from .training import Recipe, SyntheticTask, make_task, train

ABLATION_AXES = ("fusion", "depth", "distribution", "prompt", "modality")
FUSION_VARIANTS = ("pure", "baseline", "transformer", "avg", "add", "concat", "attention", "moe")


def build_model(cfg: SENConfig, seed: Optional[int] = None,
                n_modalities: Optional[int] = None) -> SEN:
    """Frozen encoders from the config's encoder seeds, trainable state from ``seed``.

    ``n_modalities`` keeps only the first modalities (modality ablation).
    """
    seed = cfg.seed if seed is None else seed
    encs = cfg.encoder_configs()
    seeds = cfg.encoder_seeds()
    m = len(encs) if n_modalities is None else n_modalities
    neurons = [build_super_neuron(c, s) for c, s in zip(encs[:m], seeds[:m])]
    ra = cfg.ra
    return build_sen(neurons, ra.layers, k=ra.prompt_tokens, fusion=ra.fusion, mode=ra.distribution,
                     learnable_prompt=ra.learnable_prompt, arm=cfg.arm, passes_mode=ra.passes_mode,
                     seed=seed, config=cfg)


def build_task(cfg: SENConfig, seed: Optional[int] = None) -> SyntheticTask:
    seed = cfg.seed if seed is None else seed
    mod = cfg.modalities[0]
    return make_task(cfg.task, cfg.task_modalities, cfg.shared_dim, mod.seq_len, mod.input_dim, seed)


def run(cfg: SENConfig, seed: Optional[int] = None, n_modalities: Optional[int] = None,
        emit: Optional[Callable[[dict], None]] = None, arm_label: Optional[str] = None,
        task: Optional[SyntheticTask] = None) -> dict:
    """Build, train and evaluate one arm; returns the :func:`train` result plus the model."""
    seed = cfg.seed if seed is None else seed
    sen = build_model(cfg, seed, n_modalities)
    task = task if task is not None else build_task(cfg, seed)
    if n_modalities is not None and n_modalities < task.n_modalities:
        task = task.restrict(n_modalities)
    out = train(sen, task, Recipe.from_config(cfg.training), seed=seed,
                arm=arm_label or cfg.arm, emit=emit)
    out["sen"] = sen
    out["task"] = task
    return out


def variant_configs(cfg: SENConfig, axis: str) -> list:
    """``(label, config, n_modalities)`` for every point of an ablation axis."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    out = []
    if axis == "fusion":
        for v in FUSION_VARIANTS:
            if v in ("pure", "baseline", "transformer"):
                out.append((v, cfg.with_overrides(arm=v), None))
            else:
                out.append((v, cfg.with_overrides(arm="ra", ra={"fusion": v}), None))
    elif axis == "depth":
        for layers in (1, 2, 3, 4):
            out.append((f"L={layers}", cfg.with_overrides(ra={"layers": layers}), None))
    elif axis == "distribution":
        for mode in ("sparse", "dense"):
            out.append((mode, cfg.with_overrides(ra={"distribution": mode}), None))
    elif axis == "prompt":
        for flag in (True, False):
            out.append(("with_Q" if flag else "without_Q",
                        cfg.with_overrides(ra={"learnable_prompt": flag}), None))
    else:
        full = cfg.n_modalities
        task_m = cfg.task_modalities
        for m in range(1, full + 1):
            names = "+".join(mc.name for mc in cfg.modalities[:m])
            out.append((names, cfg.with_overrides(task={"n_modalities": task_m}), m))
    return out


def ablate(cfg: SENConfig, axis: str, seeds: list, emit: Optional[Callable[[dict], None]] = None) -> list:
    """Run every variant of ``axis`` for every seed; returns one summary row per (variant, seed)."""
    rows = []
    for label, vcfg, n_mod in variant_configs(cfg, axis):
        for seed in seeds:
            res = run(vcfg, seed, n_modalities=n_mod, emit=emit, arm_label=label)
            final = [r for r in res["records"] if r["metric"] != "train_loss"][-1]
            rows.append({"axis": axis, "variant": label, "seed": seed,
                         "metric": final["metric"], "value": final["value"]})
    return rows


# ---------------------------------------------------------------- gradient check sweep

GRADCHECK_TOL = 1e-4


def gradcheck_config(fusion: str = "avg", distribution: str = "sparse", learnable_prompt: bool = True,
                     arm: str = "ra") -> SENConfig:
    """Small SEN for finite differences: M=3, d=8, k=2, L=2 over short depth-1 encoders."""
    from .config import parse_config
    mods = [{"name": n, "input_dim": 4, "seq_len": 3, "depth": 1, "heads": 2}
            for n in ("video", "text", "depth")]
    return parse_config({
        "modalities": mods, "shared_dim": 8, "arm": arm,
        "ra": {"layers": 2, "prompt_tokens": 2, "fusion": fusion, "distribution": distribution,
               "learnable_prompt": learnable_prompt},
        "training": {"batch": 2},
        "task": {"n_train": 8, "n_test": 8},
    })


def gradcheck_variants() -> list:
    """The 20 fusion x distribution x prompt configurations."""
    from .ra import FUSION_KINDS
    return [gradcheck_config(f, m, q) for f in FUSION_KINDS for m in ("sparse", "dense")
            for q in (True, False)]


def run_gradcheck(cfg: SENConfig, seed: Optional[int] = None, batch: int = 2,
                  perturb: float = 0.5) -> dict:
    """Finite-difference check of the SEN's trainable state plus task head on a tiny batch.

    Zero-initialised layers make some exact gradients vanish, where the relative
    error is dominated by roundoff; the state is first moved to a seeded generic
    point with N(0, ``perturb``) noise.
    """
    import numpy as np
    from .network import count_parameters
    from .tensor import Tensor
    from .training import grad_check_report, make_head, named_training_params

    seed = cfg.seed if seed is None else seed
    sen = build_model(cfg, seed)
    task = build_task(cfg, seed)
    head = make_head(task, sen.d, seed)
    named = named_training_params(sen, head)
    rng = np.random.default_rng([seed, 7])
    for _, t in named:
        t.data += perturb * rng.normal(size=t.shape)
    xs = [Tensor(x[:batch]) for x in task.train.inputs]
    y = task.train.targets[:batch]
    extras = {k: v[:batch] for k, v in task.train.extras.items()}

    def loss_fn():
        finals, ctx = sen.forward(xs)
        return head.loss(finals, ctx, y, extras)

    params = [t for _, t in named]
    err, n_checked = grad_check_report(loss_fn, params)
    frozen, trainable = count_parameters(sen)
    return {"max_rel_err": err, "checked": n_checked, "trainable": trainable,
            "head": sum(t.size for t in head.parameters()), "frozen_excluded": frozen,
            "fusion": cfg.ra.fusion, "distribution": cfg.ra.distribution,
            "learnable_prompt": cfg.ra.learnable_prompt, "pass": err < GRADCHECK_TOL}

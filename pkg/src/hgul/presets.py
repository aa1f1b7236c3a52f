"""Named synthetic graph presets used by the CLI and the acceptance suite."""

from __future__ import annotations

from .graph import RelationSpec, SyntheticConfig

# scalar knobs shared by every preset; names match the ``syn_*`` config keys
DEFAULTS = {
    "hetero3": dict(
        scale=1.0,
        num_classes=3,
        feature_dim=16,
        class_sep=0.5,
        p_intra=0.01,
        p_inter=0.03,
        cross_intra=0.02,
        cross_inter=0.005,
        train_frac=0.2,
        val_frac=0.2,
    ),
    "two_type": dict(
        scale=1.0,
        num_classes=2,
        feature_dim=8,
        class_sep=1.0,
        p_intra=0.08,
        p_inter=0.01,
        cross_intra=0.04,
        cross_inter=0.01,
        train_frac=0.2,
        val_frac=0.2,
    ),
}

_COUNTS = {
    "hetero3": {"paper": 300, "author": 200, "venue": 100},
    "two_type": {"a": 120, "b": 80},
}


def preset_names() -> tuple[str, ...]:
    return tuple(DEFAULTS)


def synthetic_config(name: str, seed: int = 0, **overrides) -> SyntheticConfig:
    """Build a :class:`SyntheticConfig` from a preset plus scalar overrides.

    ``hetero3`` is a ~600-node paper/author/venue graph whose paper-paper
    relation is heterophilous and whose cross-type relations are weakly
    homophilous.  ``two_type`` is a small two-type graph for spectral work.
    """
    if name not in DEFAULTS:
        raise ValueError(f"unknown preset {name!r}; choose from {preset_names()}")
    unknown = set(overrides) - set(DEFAULTS[name])
    if unknown:
        raise ValueError(f"unknown synthetic field(s): {sorted(unknown)}")
    p = {**DEFAULTS[name], **overrides}
    counts = {t: max(1, int(round(n * p["scale"]))) for t, n in _COUNTS[name].items()}
    if name == "hetero3":
        rels = (
            RelationSpec("paper", "cites", "paper", p["p_intra"], p["p_inter"]),
            RelationSpec("author", "writes", "paper", p["cross_intra"], p["cross_inter"]),
            RelationSpec("paper", "published_in", "venue", p["cross_intra"], p["cross_inter"]),
        )
        target = "paper"
    else:
        rels = (
            RelationSpec("a", "links", "a", p["p_intra"], p["p_inter"]),
            RelationSpec("a", "touches", "b", p["cross_intra"], p["cross_inter"]),
        )
        target = "a"
    return SyntheticConfig(
        node_counts=counts,
        target_type=target,
        relations=rels,
        num_classes=int(p["num_classes"]),
        feature_dim=int(p["feature_dim"]),
        class_sep=float(p["class_sep"]),
        train_frac=float(p["train_frac"]),
        val_frac=float(p["val_frac"]),
        seed=seed,
    )

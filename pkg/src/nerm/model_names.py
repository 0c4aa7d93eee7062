"""Canonical parameter naming shared by intervals, summaries and the CLI."""

from __future__ import annotations

__all__ = ["parameter_names"]


def parameter_names(p_b: int, p_w: int) -> list[str]:
    """Names in the canonical order (beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq)."""
    return (
        ["beta0"]
        + [f"beta1[{k}]" for k in range(p_b)]
        + ["sigma_alpha_sq"]
        + [f"beta2[{r}]" for r in range(p_w)]
        + ["sigma_e_sq"]
    )

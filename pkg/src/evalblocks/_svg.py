"""Minimal hand-emitted SVG building blocks.

No plotting dependency: output bytes are a pure function of the input, so
charts are golden-file testable.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

CLASS_COLORS = {0: "#1f77b4", 1: "#ff7f0e"}
FALLBACK_COLOR = "#7f7f7f"


def fmt(v: float) -> str:
    """Fixed-precision coordinate formatting keeps output deterministic."""
    return f"{v:.4f}".rstrip("0").rstrip(".")


def esc(text: str) -> str:
    return escape(str(text))


def document(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def text(x: float, y: float, content: str, size: int = 12, anchor: str = "middle") -> str:
    return (
        f'<text x="{fmt(x)}" y="{fmt(y)}" font-size="{size}" '
        f'font-family="sans-serif" text-anchor="{anchor}">{esc(content)}</text>'
    )


def line(x1: float, y1: float, x2: float, y2: float, color: str = "#333333", width: float = 1.0) -> str:
    return (
        f'<line x1="{fmt(x1)}" y1="{fmt(y1)}" x2="{fmt(x2)}" y2="{fmt(y2)}" '
        f'stroke="{color}" stroke-width="{fmt(width)}"/>'
    )


class Axes:
    """Maps data coordinates onto a margined pixel frame (y grows upward)."""

    def __init__(
        self,
        width: int,
        height: int,
        x_range: tuple[float, float],
        y_range: tuple[float, float],
        margin: int = 55,
    ):
        self.width, self.height, self.margin = width, height, margin
        self.x0, self.x1 = _pad_range(*x_range)
        self.y0, self.y1 = _pad_range(*y_range)

    def px(self, x: float) -> float:
        frac = (x - self.x0) / (self.x1 - self.x0)
        return self.margin + frac * (self.width - 2 * self.margin)

    def py(self, y: float) -> float:
        frac = (y - self.y0) / (self.y1 - self.y0)
        return self.height - self.margin - frac * (self.height - 2 * self.margin)

    def frame(self) -> list[str]:
        m, w, h = self.margin, self.width, self.height
        return [
            line(m, h - m, w - m, h - m),  # x axis
            line(m, m, m, h - m),  # y axis
        ]


def _pad_range(lo: float, hi: float, frac: float = 0.05) -> tuple[float, float]:
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - frac * span, hi + frac * span

"""Image utilities: world-to-canvas mapping plus SVG and Pillow drawing helpers."""

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

Color = Tuple[int, int, int]


@dataclass(frozen=True)
class CanvasTransform:
    """Maps world metres onto a canvas with y pointing up."""

    min_x: float
    max_y: float
    scale: float
    size: Tuple[int, int]

    @classmethod
    def fit(cls, points: np.ndarray, size: Tuple[int, int] = (800, 800), margin: float = 10.0) -> "CanvasTransform":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo, hi = points.min(axis=0) - margin, points.max(axis=0) + margin
        span = np.maximum(hi - lo, 1e-6)
        scale = float(min(size[0] / span[0], size[1] / span[1]))
        return cls(float(lo[0]), float(hi[1]), scale, size)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([(points[:, 0] - self.min_x) * self.scale, (self.max_y - points[:, 1]) * self.scale])


def hex_color(color: Color) -> str:
    return "#{:02x}{:02x}{:02x}".format(*color)


class SvgCanvas:
    """Minimal SVG document builder on top of ElementTree."""

    def __init__(self, transform: CanvasTransform, background: Color = (255, 255, 255)):
        self.transform = transform
        width, height = transform.size
        self.root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                               width=str(width), height=str(height), viewBox=f"0 0 {width} {height}")
        ET.SubElement(self.root, "rect", width="100%", height="100%", fill=hex_color(background))

    def group(self, name: str) -> ET.Element:
        return ET.SubElement(self.root, "g", {"class": name})

    def polyline(self, parent: ET.Element, points: np.ndarray, color: Color, width: float = 1.0,
                 opacity: float = 1.0, css_class: Optional[str] = None) -> ET.Element:
        px = self.transform.apply(points)
        attrs = {
            "points": " ".join(f"{x:.2f},{y:.2f}" for x, y in px),
            "fill": "none", "stroke": hex_color(color),
            "stroke-width": f"{width:.2f}", "stroke-opacity": f"{opacity:.3f}",
        }
        if css_class:
            attrs["class"] = css_class
        return ET.SubElement(parent, "polyline", attrs)

    def polygon(self, parent: ET.Element, corners: np.ndarray, color: Color, opacity: float = 1.0,
                css_class: Optional[str] = None) -> ET.Element:
        px = self.transform.apply(corners)
        attrs = {"points": " ".join(f"{x:.2f},{y:.2f}" for x, y in px),
                 "fill": hex_color(color), "fill-opacity": f"{opacity:.3f}"}
        if css_class:
            attrs["class"] = css_class
        return ET.SubElement(parent, "polygon", attrs)

    def circle(self, parent: ET.Element, center: Sequence[float], radius: float, color: Color) -> ET.Element:
        (cx, cy), = self.transform.apply(np.asarray(center)[None, :])
        return ET.SubElement(parent, "circle", cx=f"{cx:.2f}", cy=f"{cy:.2f}",
                             r=f"{radius * self.transform.scale:.2f}", fill="none", stroke=hex_color(color))

    def text(self, content: str, position: Tuple[float, float]) -> ET.Element:
        node = ET.SubElement(self.root, "text", x=str(position[0]), y=str(position[1]),
                             fill="#000000", style="font-family:monospace;font-size:12px")
        node.text = content
        return node

    def tostring(self) -> str:
        return ET.tostring(self.root, encoding="unicode")


class ImageRenderer:
    """Pillow raster frames in the same world mapping."""

    def __init__(self, transform: CanvasTransform, bg_color: Color = (255, 255, 255)):
        self.transform = transform
        self.bg_color = bg_color

    def create_blank_image(self) -> Image.Image:
        return Image.new("RGB", self.transform.size, self.bg_color)

    def draw_polyline(self, image: Image.Image, points: np.ndarray, color: Color, width: int = 1) -> Image.Image:
        px = [tuple(p) for p in self.transform.apply(points)]
        if len(px) >= 2:
            ImageDraw.Draw(image).line(px, fill=color, width=width)
        return image

    def draw_polygons(self, image: Image.Image, polygons: Iterable[np.ndarray], color: Color) -> Image.Image:
        draw = ImageDraw.Draw(image)
        for corners in polygons:
            draw.polygon([tuple(p) for p in self.transform.apply(corners)], fill=color)
        return image

    def draw_text(self, image: Image.Image, text: str, position: Tuple[int, int]) -> Image.Image:
        ImageDraw.Draw(image).text(position, text, fill=(0, 0, 0))
        return image

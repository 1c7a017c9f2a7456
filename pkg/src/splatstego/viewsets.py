"""Training/evaluation view sets: a directory holding cameras.json plus one
gamma-encoded PNG per view, named view_000.png, view_001.png, ...
"""

from __future__ import annotations

import os

from .errors import ShapeMismatchError
from .images import read_png, write_png
from .rasterizer import load_cameras, render, save_cameras


def view_png_name(i: int) -> str:
    return f"view_{i:03d}.png"


def write_view_dir(path, cameras, images) -> None:
    os.makedirs(path, exist_ok=True)
    save_cameras(cameras, os.path.join(path, "cameras.json"))
    for i, img in enumerate(images):
        write_png(img, os.path.join(path, view_png_name(i)))


def load_view_dir(path):
    """Return [(Camera, linear image)] for every camera record in the directory."""
    cam_path = os.path.join(path, "cameras.json")
    if not os.path.isfile(cam_path):
        raise FileNotFoundError(f"missing cameras.json in {path}")
    cameras = load_cameras(cam_path)
    views = []
    for i, cam in enumerate(cameras):
        png = os.path.join(path, view_png_name(i))
        if not os.path.isfile(png):
            raise FileNotFoundError(f"missing {view_png_name(i)} in {path}")
        img = read_png(png)
        if img.shape != (cam.height, cam.width, 3):
            raise ShapeMismatchError(
                f"{png}: image is {img.shape[:2]}, camera says {(cam.height, cam.width)}")
        views.append((cam, img))
    return views


def render_views(cloud, cameras, background=(0.0, 0.0, 0.0), threads: int = 1):
    return [render(cloud, cam, background=background, threads=threads).image
            for cam in cameras]

"""Exception types raised across the package."""


class HbgsError(Exception):
    """Base class for all package errors."""


class BehindCameraError(HbgsError):
    def __init__(self, depth):
        super().__init__(f"behind camera (depth={float(depth):.3g})")
        self.depth = float(depth)


class UnmatchedAnchorError(HbgsError):
    def __init__(self, msg="unmatched anchor"):
        super().__init__(msg)


class ShapeError(HbgsError, ValueError):
    pass


class ColmapError(HbgsError):
    pass


class CheckpointError(HbgsError):
    pass


class DivergenceError(HbgsError):
    def __init__(self, step, what="optimization diverged"):
        super().__init__(f"{what} at step {step}")
        self.step = step


class GeometryError(HbgsError, ValueError):
    """Invalid camera or rotation input."""

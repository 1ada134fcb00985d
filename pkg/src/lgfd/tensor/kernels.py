"""Backend selection for the conv2d patch kernels.

The compiled extension is preferred when it imports; otherwise the numpy
fallback is used. :func:`use_backend` switches explicitly (tests, benchmark).
"""

from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels


def available_backends() -> list:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def backend_name() -> str:
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name: str) -> None:
    global _active
    if name == "python":
        _active = _pykernels
    elif name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}; expected 'python' or 'compiled'")


def im2col(xp, k, stride, oh, ow):
    return _active.im2col(xp, k, stride, oh, ow)


def col2im(cols, hp, wp, stride):
    return _active.col2im(cols, hp, wp, stride)


def pad2d(x, pad):
    return _active.pad2d(x, pad)

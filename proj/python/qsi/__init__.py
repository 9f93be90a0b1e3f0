try:
    from ._qsi import *  # noqa: F401,F403  installed layout
    from ._qsi import __version__  # noqa: F401
except ImportError:  # build-tree layout: _qsi sits next to the package dir
    from _qsi import *  # noqa: F401,F403
    from _qsi import __version__  # noqa: F401

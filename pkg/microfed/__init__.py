from .utils import __version__, __microfed_dir__

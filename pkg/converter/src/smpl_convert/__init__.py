"""smpl_convert: SMPL assets and capture folders -> neutral file layouts.

This package is a batch converter.  It reads SMPL body-model pickles and
PeopleSnapshot-style capture directories and writes the two documented
file formats the avatar pipeline consumes: the ``body.json``/``body.bin``
bundle and the ``dataset.json`` image-folder layout.  It deliberately does
not import the pipeline package — the file formats are the only contract.
"""

__version__ = "0.1.0"

from .body import convert_body
from .capture import convert_capture

__all__ = ["convert_body", "convert_capture"]

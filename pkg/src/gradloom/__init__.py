"""gradloom: synchronized distributed SGD over budgeted heterogeneous workers."""

__version__ = "0.1.0"

ARCHIVE_FORMAT_VERSION = "gradloom-1"
PROTOCOL_VERSION = 1

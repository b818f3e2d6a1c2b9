"""Earth system data cubes: chunked storage, cubing, harmonisation,
weighted streaming statistics, split-apply-combine and sampling."""

from .model import (
    AttributeSet,
    CubeSchema,
    DataCube,
    Dimension,
    DimKind,
    Grid,
    ProvenanceRecord,
    append_provenance,
    lat_grid,
    lon_grid,
    order,
    subset,
    time_grid,
    validate_grid,
)
from .store import open_cube, read_window, write_cube, write_window

__version__ = "0.1.0"

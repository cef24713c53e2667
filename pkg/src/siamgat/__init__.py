"""Graph-attention Siamese tracking on plain numpy."""
from .config import RunConfig, load_config
from .geometry import BoundingBox, TemplateROI, iou, project_box
from .model import SiamGATModel
from .tracker import init, track_sequence, update

__all__ = ["BoundingBox", "RunConfig", "SiamGATModel", "TemplateROI", "init", "iou",
           "load_config", "project_box", "track_sequence", "update"]
__version__ = "0.1.0"

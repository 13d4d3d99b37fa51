"""spinereg: articulated registration of spine meshes to intraoperative point clouds."""

__version__ = "0.1.0"

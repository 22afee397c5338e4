"""Adverts: place 3D objects into monocular video with occlusion handling.

The package is organised around the pipeline stages:

- :mod:`adverts.media_store` — frame ingestion, resolution ladder, projects
- :mod:`adverts.geometry` — pinhole camera model and multi-view solvers
- :mod:`adverts.features` / :mod:`adverts.tracking` / :mod:`adverts.bundle`
  — structure-from-motion camera tracking
- :mod:`adverts.depth_plane` — depth ingestion, normals, plane anchoring
- :mod:`adverts.segmentation` — interactive graph-cut masks and propagation
- :mod:`adverts.matting` — trimaps, background plates, alpha solving
- :mod:`adverts.renderer` — software rasterizer and layer merging
- :mod:`adverts.pipeline` — checkpointed stage runner shared by CLI/service
- :mod:`adverts.service` — HTTP API with JWT auth and resumable jobs
"""

__version__ = "0.1.0"

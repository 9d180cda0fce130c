"""Multi-modal transformer encoding model for parcel-level fMRI prediction, built on a small numpy autodiff."""

__version__ = "0.1.0"

"""Query-based abstractive summarization with diversity-driven attention, on a small numpy autodiff core."""

__version__ = "0.1.0"

"""ECoG motor-imagery analysis: preprocessing, spectra, UMAP+KNN screening and
small CNN / CNN-LSTM classifiers."""

__version__ = "0.1.0"

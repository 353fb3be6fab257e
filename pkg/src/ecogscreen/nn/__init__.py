"""Small numpy deep-learning engine for the CNN and CNN-LSTM classifiers."""

from .layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, LSTM, MaxPool2D, ReLU, SequenceFlatten,
                     ShapeError, Softmax)
from .model import (DivergenceError, ModelGraph, Optimizer, TrainConfig, backward, build_cnn, build_cnn_lstm,
                    build_model, cross_entropy, evaluate, fine_tune, forward, loss_and_grads, predict_proba,
                    train, write_history)
from .io import ChecksumError, ModelFileError, VersionError, load_model, save_model
from .search import SearchResult, SearchSpace, TaskSpec, hyper_search

from .model import ArchConfig, NurdNet
from .serialize import load_model, save_model
from .train import TrainConfig, train

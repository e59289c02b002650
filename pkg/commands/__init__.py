from commands.evaluate import EvaluateCommand
from commands.gen_data import GenDataCommand
from commands.plot import PlotCommand
from commands.pretrain import PretrainCommand
from commands.train import TrainCommand


COMMANDS = (GenDataCommand, PretrainCommand, TrainCommand, EvaluateCommand, PlotCommand)

"""Sparse coding with block-matching alignment of tensor dictionary atoms."""

from .alignment import align, best_match
from .classifier import ClassifierParams, Label, loss, loss_grad_alpha, loss_grad_W, predict
from .lasso import (AlignedDictionary, NumericalError, SolverConfig, SparseCode, assemble,
                    encode, kkt_residual, solve)
from .learn import (LearnConfig, Model, TrainState, grad_dictionary_adjoint, init_dictionary,
                    jacobian_entry, project_unit_fro, sgd_step, train)
from .tensor import (Dictionary, FlowField, GeometryError, Grid, TensorAtom, TensorImage,
                     WindowView, aligned_subatom, eval_joint_objective, eval_l1_objective,
                     identity_flow, tensorize, window_view)

__version__ = "0.1.0"

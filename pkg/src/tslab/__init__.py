"""Teacher-student two-layer networks: population loss, critical points and gradient flow.

The package works on the population (infinite-data) loss of a student
``f(x) = sum_i a_i sigma(w_i . x)`` against an orthogonal teacher of the same
form, expressed through the Gaussian interaction ``g(r1, r2, u)``.
"""
from .activations import ERF, GELU, RELU, SIGMOID, TANH, ActivationKind, softplus
from .critical_points import (CriticalPoint, NoBracketError, build_copy_average, ca_loss,
                              conjectured_loss, count_ca_points, enumerate_partitions,
                              erf_one_neuron_loss, one_neuron_erf, one_neuron_fixed_point,
                              one_neuron_relu, optimal_ca)
from .gradient_flow import FlowConfig, FlowRecord, classify, init_student, integrate
from .kernels import ERF_ANALYTIC, RELU_ANALYTIC, Analytic, GaussHermite, KernelSpec, MonteCarlo
from .population_loss import (OrderParams, StudentNet, TeacherNet, build_unit_orthonormal_teacher,
                              gradient, hessian, loss, to_order_params)

__version__ = "0.1.0"

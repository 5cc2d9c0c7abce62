"""Linear-attention regression model of positional-encoding generalisation."""

from .expected import (MCGradient, expected_grad_ape, expected_grad_aug, expected_grad_rpe, expected_loss_ape,
                       expected_loss_rpe, gram_test_loss, mc_gradient, position_test_loss, supervision_weights)
from .flow import (FlowConfig, GramSeries, TrainResult, case1_offdiag, circulant_positions, closed_form_A0,
                   flow_integrate, gram_rhs, gram_spread, p_flow_integrate, sgd_population_train)
from .task import APEState, RPEState, TheoryTask, ape_predict, rpe_predict, sample_task

from .errors import WavepacketLabError, ParameterError, ConstructionError, ResolutionError, UnsupportedRepresentationError, \
    FlowEscapeError, StabilityError, TimeRangeError, FitError, ConfigError, ExperimentError, TruncationWarning, ScaleClampWarning
from .grids import SpatialGrid, SpatialField
from .phase_space import PhasePoint, ScaleParams, PhaseSpaceRegion, FrequencyMode, Lattice, lattice_points, d_r_metric, thicken, \
    coherent_state, partition_weights
from .symbols import SymbolModel, MetricSymbol, FrequencyCutoff, constant_metric, cosine_metric, perturbed_identity_metric, \
    fourier_metric, lowpass_metric, make_schrodinger, make_halfwave, derivative_check, regularity_constants, loss_budget
from .flow import Bicharacteristic, integrate_bicharacteristic, integrate_many, bilipschitz_report, separation_report, \
    averaged_hessian
from .fbi import PhaseSpaceGrid, PhaseSpaceField, fbi_forward, fbi_adjoint, localize
from .propagate import PropagationMethod, PacketMode, WavePacket, FieldTrajectory, propagate_reference, packet_evolve, \
    wavepacket_decompose, parametrix_defect, almost_orthogonality
from .estimates import SpaceTimeCube, lp_spacetime_norm, dispersive_fit, transversality_check, energy_shell_sample, \
    conservation_flags, quadrilinear_integral, bilinear_sweep, localization_report
from .tubes import CubeGrid, Tube, TubeFamily, TubeSet, tube_from_bichar, incidences, pigeonhole_buckets, focusing_relation, \
    double_end_count
from .experiments import ExperimentConfig, ExperimentName, list_experiments

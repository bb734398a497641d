// Guards written as `!(x > 0.0)` must reject NaN, which the suggested
// positive form would silently accept; index loops in the matrix kernels
// address several arrays per iteration.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod correlate;
pub mod fit;
pub mod flid;
pub mod sim;
pub mod stream;
pub mod trace;

pub use correlate::{
    correlate_brute_force, correlate_long_delay, correlate_pulsed, fit_flicker,
    subtract_background, CorrectionMode, CorrelationHistogram, CorrelationMode, PurityResult,
};
pub use fit::{FitParameter, FitResult};
pub use flid::{build_flid, flid_power_series, FlidMap, FlidMode};
pub use sim::{analytic_flicker_plateau, simulate, EmitterModel, SimulationConfig};
pub use stream::{
    import_csv, read_stream, write_stream, Origin, PhotonRecord, PhotonStream, StreamHeader,
};
pub use trace::{
    bin_intensity, mean_arrival_trace, segment_states, ArrivalStatistic, IntensityTrace,
    LifetimeTrace, StateLabel, StateSegmentation,
};

//! Dense optical flow from event-camera streams.

pub mod error;
pub mod event;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod scalar;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use event::{
    count_image, partition_stream, CameraGeometry, CountImage, Event, EventWindow, Partitioned,
    PartitionScheme, Polarity,
};
pub use flow::{
    downsample_flow, reconstruct_displacement, sample_flow, upsample_flow, DisplacementMap,
    FlowMap, FlowSequence,
};
pub use objective::{
    loss_at_reference, loss_gradient, loss_multi_reference, loss_multi_timescale,
    normalize_timestamp, FlowGradient, LossConfig, LossReport, LossTerm,
};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckSummary};
pub use io::{
    flow_wheel_rgb, read_events, read_flow, render_displacement_png, render_flow_png,
    render_scalar_png, write_events_bin, write_events_csv, write_flow, write_pgm16, EventFormat,
    EventStream, FlowFile, RenderSpec, RenderTarget,
};
pub use metrics::{epe, evaluate, fwl, fwl_at, rsat, EpeStats, MetricReport};
pub use optimizer::{
    estimate_window, run_sequential, EstimationResult, LevelStats, OptimizerConfig, Progress,
    SequentialRun, WindowRun,
};
pub use scalar::Scalar;
pub use synth::{generate, render_gt, GroundTruth, SceneKind, SceneSpec};
pub use warp::{
    border_mask, kernel, splat, timestamp_image, warp_iterative, warp_linear, Iwe, TimestampImage,
    WarpMode, WarpedEvent,
};

pub type FlowMap32 = FlowMap<f32>;
pub type FlowMap64 = FlowMap<f64>;
pub type FlowSequence32 = FlowSequence<f32>;
pub type FlowSequence64 = FlowSequence<f64>;
pub type DisplacementMap32 = DisplacementMap<f32>;
pub type DisplacementMap64 = DisplacementMap<f64>;

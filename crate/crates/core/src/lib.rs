//! pushtrace models the GPU command-submission path in software: bit-exact
//! pushbuffer and GPFIFO codecs, a channel/doorbell state machine with
//! USERD/RAMFC replica propagation, a simulated PBDMA consumer driving two
//! DMA engines under a calibrated cost model, doorbell interception with
//! full submission reconstruction, and sweep/analysis tooling on top.
//!
//! The simulator core is deterministic and externally synchronized; sweeps
//! parallelize across independent simulator instances (rayon, behind the
//! default `parallel` feature).

pub mod capture;
pub mod channel;
pub mod codec;
pub mod config;
pub mod driver;
pub mod pbdma;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod vmem;

pub use capture::{fit_bandwidth, gap_percent, render_trace, Capture, FitResult, TraceRecord};
pub use channel::{ChannelContext, ChannelState, ChannelTable};
pub use codec::{
    decode_gpfifo_entry, decode_header, decode_launch_dma, decode_stream, encode_gpfifo_entry,
    encode_header, encode_launch_dma, ClassBindings, GpFifoEntry, MethodHeader, MethodOp,
    MethodTable,
};
pub use config::ScenarioConfig;
pub use driver::{
    graph_launch, graph_upload, memcpy, CopyDirection, DriverConfig, GraphSpec, LaunchStats,
    LaunchStrategy, Stream, StrategyKind,
};
pub use pbdma::{CostModel, EngineKind, ExecutionReport, Pbdma};
pub use sim::{SimConfig, Simulator};
pub use vmem::{AllocTag, MemDomain, MemStore};

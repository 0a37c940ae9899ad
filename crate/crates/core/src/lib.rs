//! Topology extraction from raster piping and instrumentation plans.
//!
//! The pipeline tiles a plan, finds equipment symbols, extracts pipe lines
//! with a Hough transform, classifies line crossings, walks the lines to
//! derive which symbols are connected, and exports the resulting graph.

pub mod config;
pub mod crossings;
pub mod detect;
pub mod eval;
pub mod export;
pub mod geom;
pub mod lines;
pub mod overlay;
pub mod pipeline;
pub mod plan;
pub mod synth;
pub mod topology;

pub use config::{DetectorMode, PipelineConfig};
pub use crossings::{find_crossings, intersect, CrossingParams, FourWayRule, LineCrossing};
pub use detect::{ClassRegistry, SymbolClass, SymbolDetection, Template, TemplateParams};
pub use eval::{metrics, ConfusionCounts, MetricReport, PrCurve};
pub use export::ClassMapping;
pub use geom::{BoundingBox, Point};
pub use lines::{BinaryImage, HoughParams, LineSegment, MergeParams};
pub use pipeline::{Extraction, PipelineError, RunManifest};
pub use plan::{PlanImage, Tile};
pub use topology::{ConnectionMatrix, DeriveParams, GraphNode, TopologyGraph};

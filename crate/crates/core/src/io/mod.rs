//! Configuration, CSV data and reports.

pub mod config;
pub mod data;
pub mod report;

pub use config::{parse_config, parse_pairs, Mode, ReportFormat, RunConfig};
pub use data::{load_csv, load_csv_from, write_sample_csv, ColumnMapping, LoadedSample};
pub use report::{read_report_csv, render_csv, render_text, write_report, EstimateReport};

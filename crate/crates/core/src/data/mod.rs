//! Trip records to hourly demand cubes, external factors, splits and windows.

pub mod cube;
pub mod externals;
pub mod grid;
pub mod split;
pub mod synth;
pub mod trip;
pub mod window;

pub use cube::{build_demand, read_archive, write_archive, write_long_csv, DemandCube, IngestReport, CHANNELS, CHANNEL_NAMES, RENT, RETURN};
pub use externals::{encode_externals, DayHalf, DayType, ExternalFactors, Period, PeriodBoundaries, Weather, WeatherTable, EXTERNAL_DIM};
pub use grid::GridSpec;
pub use split::{split_by_date, SplitBoundaries, Splits};
pub use synth::{generate_synthetic, Hotspot, Propagation, SynthConfig, SynthOutput};
pub use trip::{read_trips, write_trips, TripRecord};
pub use window::{Corpus, WindowSample};

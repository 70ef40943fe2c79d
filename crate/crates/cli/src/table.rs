//! RFC-4180 CSV output with floats at 9 significant digits.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::CliError;

/// Shortest decimal form of `x` rounded to 9 significant digits.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn opt9(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt9)
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

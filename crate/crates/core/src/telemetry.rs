//! KPI log export. Output is canonical: the same log always renders to the
//! same bytes, independent of platform and locale.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::env::KpiRecord;

pub const KPI_HEADER: [&str; 12] = [
    "step",
    "cell_id",
    "slice_id",
    "demand_prb",
    "requested_prb",
    "alloc_prb",
    "gap_prb",
    "abs_gap_prb",
    "reward",
    "cqi",
    "epsilon",
    "congestion_flag",
];

/// Renders a float with 6 significant digits, like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_fraction(&format!("{x:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn row(r: &KpiRecord) -> [String; 12] {
    [
        r.step.to_string(),
        r.cell_id.to_string(),
        r.slice_id.to_string(),
        r.demand_prb.to_string(),
        r.requested_prb.to_string(),
        r.alloc_prb.to_string(),
        r.gap_prb.to_string(),
        r.abs_gap_prb.to_string(),
        format_sig6(r.reward),
        r.cqi.to_string(),
        format_sig6(r.epsilon),
        u8::from(r.congestion_flag).to_string(),
    ]
}

/// Writes the header and one row per record, in the order given.
pub fn write_kpi_csv<W: Write>(records: &[KpiRecord], writer: W) -> io::Result<()> {
    let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    csv.write_record(KPI_HEADER)?;
    for r in records {
        csv.write_record(row(r))?;
    }
    csv.flush()
}

/// Writes the KPI log to `path`, sorted by `(step, cell_id, slice_id)`.
pub fn export_kpi_csv(records: &[KpiRecord], path: &Path) -> io::Result<()> {
    let mut sorted: Vec<&KpiRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.step, r.cell_id, r.slice_id));
    let owned: Vec<KpiRecord> = sorted.into_iter().cloned().collect();
    let mut file = BufWriter::new(File::create(path)?);
    write_kpi_csv(&owned, &mut file)?;
    file.flush()
}

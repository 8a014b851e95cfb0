//! Subject-level CSV input with header `stage,dose,response`.
//!
//! Doses are matched to the design by their decimal text after trimming
//! (`0.20`, `+0.2` and `.2` all mean `0.2`), never by float equality.

use std::io::Read;

use adaptpoc_core::data::StageSummary;
use adaptpoc_sim::SubjectRecord;

use crate::CliError;

/// Canonical decimal text of a dose: no sign for zero, no leading zeros in
/// the integer part, no trailing zeros in the fraction.
pub fn canonical_dose(text: &str) -> Result<String, CliError> {
    let t = text.trim();
    let t = t.strip_prefix('+').unwrap_or(t);
    if t.is_empty() || t.starts_with('-') || !t.chars().all(|c| c.is_ascii_digit() || c == '.') || t.matches('.').count() > 1 {
        return Err(CliError::Data(format!("dose `{text}` is not a nonnegative decimal number")));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    Ok(if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    })
}

fn design_keys(doses: &[f64]) -> Result<Vec<String>, CliError> {
    doses.iter().map(|d| canonical_dose(&format!("{d}"))).collect()
}

#[derive(Debug)]
pub struct StageData {
    pub stage1: StageSummary,
    pub stage2: Option<StageSummary>,
}

/// Reads the records and groups them by stage and design dose, keeping file
/// order within each group.
pub fn read_stages(reader: impl Read, design_doses: &[f64]) -> Result<StageData, CliError> {
    let keys = design_keys(design_doses)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["stage", "dose", "response"] {
        return Err(CliError::Data("header must be `stage,dose,response`".into()));
    }
    let k = design_doses.len();
    let mut groups = [vec![Vec::new(); k], vec![Vec::new(); k]];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let row = line + 2;
        let stage: u8 = rec[0]
            .parse()
            .ok()
            .filter(|s| *s == 1 || *s == 2)
            .ok_or_else(|| CliError::Data(format!("line {row}: stage must be 1 or 2")))?;
        let key = canonical_dose(&rec[1]).map_err(|e| CliError::Data(format!("line {row}: {e}")))?;
        let i = keys.iter().position(|k| *k == key).ok_or_else(|| {
            CliError::Data(format!("line {row}: dose {} is not a stage-1 design dose", &rec[1]))
        })?;
        let y: f64 = rec[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CliError::Data(format!("line {row}: response must be a finite number")))?;
        groups[usize::from(stage - 1)][i].push(y);
    }
    let [g1, g2] = groups;
    if g1[0].is_empty() {
        return Err(CliError::Data("no stage-1 placebo (dose 0) records".into()));
    }
    if let Some(i) = g1.iter().position(Vec::is_empty) {
        return Err(CliError::Data(format!("no stage-1 records at dose {}", design_doses[i])));
    }
    let stage1 = StageSummary::from_groups(design_doses.to_vec(), &g1)?;
    let present: Vec<usize> = (0..k).filter(|&i| !g2[i].is_empty()).collect();
    let stage2 = if present.is_empty() {
        None
    } else {
        if present[0] != 0 {
            return Err(CliError::Data("stage 2 has no placebo (dose 0) records".into()));
        }
        let doses = present.iter().map(|&i| design_doses[i]).collect();
        let g: Vec<Vec<f64>> = present.iter().map(|&i| g2[i].clone()).collect();
        Some(StageSummary::from_groups(doses, &g)?)
    };
    Ok(StageData { stage1, stage2 })
}

/// Writes records with shortest round-trip number formatting.
pub fn write_records(path: &std::path::Path, records: &[SubjectRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["stage", "dose", "response"]).map_err(|e| CliError::Io(e.to_string()))?;
    for r in records {
        w.write_record([r.stage.to_string(), format!("{}", r.dose), format!("{}", r.response)])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_forms() {
        for (a, b) in [("0.20", "0.2"), ("+.2", "0.2"), ("00.05", "0.05"), ("1.000", "1"), ("0", "0"), (" 0.6 ", "0.6")] {
            assert_eq!(canonical_dose(a).unwrap(), b);
        }
        for bad in ["-0.1", "1e-1", "", "0.1.2", "abc"] {
            assert!(canonical_dose(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn rejects_unknown_stage_two_dose_and_missing_placebo() {
        let doses = [0.0, 0.5, 1.0];
        let ok = "stage,dose,response\n1,0,1\n1,0,2\n1,0.5,1\n1,0.5,3\n1,1,2\n1,1,5\n";
        assert!(read_stages(ok.as_bytes(), &doses).unwrap().stage2.is_none());
        let bad_dose = format!("{ok}2,0,1\n2,0.7,2\n");
        assert!(matches!(read_stages(bad_dose.as_bytes(), &doses), Err(CliError::Data(_))));
        let no_placebo = "stage,dose,response\n1,0.5,1\n1,1,2\n";
        assert!(matches!(read_stages(no_placebo.as_bytes(), &doses), Err(CliError::Data(_))));
        let bad_header = "stage,dose,y\n1,0,1\n";
        assert!(matches!(read_stages(bad_header.as_bytes(), &doses), Err(CliError::Data(_))));
    }
}

//! Task difficulty from learned uncertainty: `1/σ²` per task (and group),
//! compared with the PHQ-8 items' published discrimination capacity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelParams, Uncertainty};
use crate::phq::{Group, NUM_TASKS};

/// Discrimination capacity of PHQ-1 .. PHQ-8.
pub const DC_REFERENCE: [f64; NUM_TASKS] = [3.06, 3.42, 1.91, 2.67, 2.22, 2.86, 2.55, 2.43];

/// Items marked as highest / lowest in a column.
pub const TOP_MARKS: usize = 3;
pub const BOTTOM_MARKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    /// `None` for a shared (UW) profile.
    pub group: Option<Group>,
    pub inv_sigma2: [f64; NUM_TASKS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    pub rows: Vec<ProfileRow>,
}

/// `exp(-s)` for every learned log-variance.
pub fn difficulty_profile(params: &ModelParams) -> Result<DifficultyProfile> {
    let s = params.uncertainty();
    let row = |offset: usize| -> [f64; NUM_TASKS] { std::array::from_fn(|t| (-s[offset + t]).exp()) };
    let rows = match params.config.uncertainty {
        Uncertainty::None => {
            return Err(Error::Mode(
                "model has no uncertainty parameters (unitask or MTL mode)".into(),
            ))
        }
        Uncertainty::PerTask => vec![ProfileRow { group: None, inv_sigma2: row(0) }],
        Uncertainty::PerTaskGroup => Group::ALL
            .iter()
            .map(|&g| ProfileRow {
                group: Some(g),
                inv_sigma2: row(g.index() * NUM_TASKS),
            })
            .collect(),
    };
    Ok(DifficultyProfile { rows })
}

impl DifficultyProfile {
    /// Bar-chart data: one `task,group,value` row per task and group.
    pub fn write_csv<W: Write>(&self, w: W, manifest_hash: &str) -> Result<()> {
        let mut w = w;
        writeln!(w, "# manifest_hash: {manifest_hash}").map_err(|e| Error::io("writing weights", e))?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["task", "group", "value"])?;
        for row in &self.rows {
            let g = row.group.map_or("all", |g| g.as_str());
            for (t, v) in row.inv_sigma2.iter().enumerate() {
                csv.write_record([format!("PHQ-{}", t + 1), g.to_string(), v.to_string()])?;
            }
        }
        csv.flush().map_err(|e| Error::io("writing weights", e))?;
        Ok(())
    }
}

/// Average (fractional) ranks, 1-based, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j share ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `Ok(None)` when
/// either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length inputs of length >= 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("spearman inputs must be finite".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Top,
    Bottom,
    None,
}

impl Mark {
    fn as_str(self) -> &'static str {
        match self {
            Mark::Top => "top",
            Mark::Bottom => "bottom",
            Mark::None => "",
        }
    }
}

/// Marks the three highest and two lowest entries. Equal values are taken
/// in index order.
pub fn markings(values: &[f64]) -> Vec<Mark> {
    let mut marks = vec![Mark::None; values.len()];
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    for &i in idx.iter().take(TOP_MARKS) {
        marks[i] = Mark::Top;
    }
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    for &i in idx.iter().take(BOTTOM_MARKS) {
        if marks[i] == Mark::None {
            marks[i] = Mark::Bottom;
        }
    }
    marks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcRow {
    pub task: usize,
    pub dc: f64,
    pub dc_mark: Mark,
    pub inv_sigma2: f64,
    pub inv_sigma2_mark: Mark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcReport {
    pub group: Option<Group>,
    pub rows: Vec<DcRow>,
    /// `None` when the profile (or reference) is constant.
    pub spearman_rho: Option<f64>,
}

pub fn dc_report(
    inv_sigma2: &[f64; NUM_TASKS],
    reference: &[f64; NUM_TASKS],
    group: Option<Group>,
) -> Result<DcReport> {
    let dc_marks = markings(reference);
    let marks = markings(inv_sigma2);
    let rows = (0..NUM_TASKS)
        .map(|t| DcRow {
            task: t + 1,
            dc: reference[t],
            dc_mark: dc_marks[t],
            inv_sigma2: inv_sigma2[t],
            inv_sigma2_mark: marks[t],
        })
        .collect();
    Ok(DcReport {
        group,
        rows,
        spearman_rho: spearman(inv_sigma2, reference)?,
    })
}

/// One report per profile row.
pub fn dc_reports(profile: &DifficultyProfile) -> Result<Vec<DcReport>> {
    profile
        .rows
        .iter()
        .map(|r| dc_report(&r.inv_sigma2, &DC_REFERENCE, r.group))
        .collect()
}

/// Comparison table as CSV; rho is repeated per row (empty when undefined).
pub fn write_dc_csv<W: Write>(reports: &[DcReport], w: W, manifest_hash: &str) -> Result<()> {
    let mut w = w;
    writeln!(w, "# manifest_hash: {manifest_hash}").map_err(|e| Error::io("writing dc report", e))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["group", "task", "dc", "dc_mark", "inv_sigma2", "inv_sigma2_mark", "spearman_rho"])?;
    for rep in reports {
        let g = rep.group.map_or("all", |g| g.as_str());
        let rho = rep.spearman_rho.map(|r| r.to_string()).unwrap_or_default();
        for row in &rep.rows {
            csv.write_record([
                g.to_string(),
                format!("PHQ-{}", row.task),
                row.dc.to_string(),
                row.dc_mark.as_str().to_string(),
                row.inv_sigma2.to_string(),
                row.inv_sigma2_mark.as_str().to_string(),
                rho.clone(),
            ])?;
        }
    }
    csv.flush().map_err(|e| Error::io("writing dc report", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossMode;
    use crate::net::NetConfig;

    #[test]
    fn profile_values() {
        let mut p = ModelParams::zeros(NetConfig::new([1, 1, 1], 2, LossMode::Uw));
        let prof = difficulty_profile(&p).unwrap();
        assert_eq!(prof.rows[0].inv_sigma2, [1.0; 8]);
        p.uncertainty_mut()[3] = 4f64.ln();
        let prof = difficulty_profile(&p).unwrap();
        assert!((prof.rows[0].inv_sigma2[3] - 0.25).abs() < 1e-15);

        let mut q = ModelParams::zeros(NetConfig::new([1, 1, 1], 2, LossMode::UFair));
        q.uncertainty_mut()[8 + 2] = 1.0;
        let prof = difficulty_profile(&q).unwrap();
        assert_eq!(prof.rows.len(), 2);
        assert_eq!(prof.rows[1].group, Some(Group::S1));
        assert!(prof.rows[1].inv_sigma2[2] < prof.rows[0].inv_sigma2[2]);

        let m = ModelParams::zeros(NetConfig::new([1, 1, 1], 2, LossMode::Mtl));
        assert!(matches!(difficulty_profile(&m), Err(Error::Mode(_))));
    }

    #[test]
    fn spearman_basics() {
        let a = [0.3, 1.2, -0.5, 2.0, 0.0];
        assert_eq!(spearman(&a, &a).unwrap(), Some(1.0));
        let mut sorted = a;
        sorted.sort_by(f64::total_cmp);
        let rev: Vec<f64> = sorted.iter().rev().cloned().collect();
        assert!((spearman(&sorted, &rev).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[0.5, 0.1, 0.5, 0.9]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn dc_reference_marks() {
        let m = markings(&DC_REFERENCE);
        use Mark::*;
        assert_eq!(m, vec![Top, Top, Bottom, None, Bottom, Top, None, None]);
    }

    #[test]
    fn report_on_reference_itself() {
        let r = dc_report(&DC_REFERENCE, &DC_REFERENCE, None).unwrap();
        assert_eq!(r.spearman_rho, Some(1.0));
        assert!(r.rows.iter().all(|row| row.dc_mark == row.inv_sigma2_mark));
        let flat = dc_report(&[0.7; 8], &DC_REFERENCE, None).unwrap();
        assert_eq!(flat.spearman_rho, Option::None);
    }
}

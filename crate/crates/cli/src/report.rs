//! Evaluation report: tab-separated rows plus an optional aligned table
//! for terminals. The TSV layout is a stable interface; downstream
//! plotting scripts key on the exact header names.

/// One recall row, aggregated over every scene sharing a view count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub object: String,
    pub views: usize,
    pub keypoints: usize,
    pub metric: String,
    pub evaluable: usize,
    pub recalled: usize,
    pub false_detections: usize,
    pub ar: f64,
}

/// One plot-ready point: keypoint count against recall and mean solve
/// time, pooled over all views. Concatenating series rows from runs at
/// different keypoint counts yields an accuracy/runtime curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub keypoints: usize,
    pub metric: String,
    pub ar: f64,
    pub mean_solve_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results_config_hash: String,
    pub scene_config_hash: String,
    pub seed: u64,
    pub scene_count: usize,
    pub rows: Vec<ReportRow>,
    pub series: Vec<SeriesRow>,
}

pub const TABLE_HEADER: &str =
    "object\tviews\tkeypoints\tmetric\tevaluable\trecalled\tfalse_detections\tar";
pub const SERIES_HEADER: &str = "series\tkeypoints\tmetric\tar\tmean_solve_ms";

fn format_ms(ms: Option<f64>) -> String {
    match ms {
        Some(v) => format!("{v:.3}"),
        None => String::new(),
    }
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("# multi-view pose evaluation report\n");
        out.push_str("# schema_version\t1\n");
        out.push_str(&format!("# results_config_hash\t{}\n", self.results_config_hash));
        out.push_str(&format!("# scene_config_hash\t{}\n", self.scene_config_hash));
        out.push_str(&format!("# seed\t{}\n", self.seed));
        out.push_str(&format!("# scenes\t{}\n", self.scene_count));
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\n",
                r.object,
                r.views,
                r.keypoints,
                r.metric,
                r.evaluable,
                r.recalled,
                r.false_detections,
                r.ar
            ));
        }
        out.push_str(SERIES_HEADER);
        out.push('\n');
        for s in &self.series {
            out.push_str(&format!(
                "series\t{}\t{}\t{:.4}\t{}\n",
                s.keypoints,
                s.metric,
                s.ar,
                format_ms(s.mean_solve_ms)
            ));
        }
        out
    }

    /// Column-aligned rendering of the recall table for stdout.
    pub fn to_pretty(&self) -> String {
        let header: Vec<String> = TABLE_HEADER.split('\t').map(str::to_string).collect();
        let mut grid: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            grid.push(vec![
                r.object.clone(),
                r.views.to_string(),
                r.keypoints.to_string(),
                r.metric.clone(),
                r.evaluable.to_string(),
                r.recalled.to_string(),
                r.false_detections.to_string(),
                format!("{:.2}", r.ar),
            ]);
        }
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&format!("{cell:>width$}", width = widths[c]));
            }
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

//! Investigation project: evidence annotations, measurements, alignment
//! records and the printable report.
//!
//! A project is one JSON document carrying an explicit `schema_version`.
//! Point clouds stay in PLY files referenced by paths relative to the
//! project file. Timestamps are always supplied by the caller.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::AlignmentResult;
use crate::geometry::Point3;
use crate::keyframing::KeyframeStats;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("project schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
    #[error("project file could not be parsed: {0}")]
    ParseError(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SceneError {
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::SchemaVersionMismatch { .. } => "schema_version_mismatch",
            SceneError::ParseError(_) => "parse_error",
            SceneError::InvalidInput(_) => "invalid_input",
            SceneError::NotFound(_) => "not_found",
            SceneError::Io { .. } => "io",
        }
    }
}

/// Keyframe selection outcome for one detector preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetStats {
    pub preset: String,
    pub stats: KeyframeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub cameras: usize,
    pub mean_reproj_error_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRecord {
    pub id: usize,
    /// PLY file relative to the project file.
    pub path: String,
    pub source: String,
    pub point_count: usize,
    /// Present for clouds produced by a cluster reconstruction.
    pub reconstruction: Option<ReconstructionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub data_id: usize,
    pub model_id: usize,
    pub correspondences: Vec<(usize, usize)>,
    pub with_scale: bool,
    pub result: AlignmentResult,
    /// RMS and max distance from the aligned data cloud to the model.
    pub cloud_distance: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceAnnotation {
    pub id: u64,
    pub anchor: Point3,
    pub label: String,
    pub author: String,
    pub comment: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: u64,
    pub p1: Point3,
    pub p2: Point3,
    /// Annotation ids when the endpoints were taken from annotations.
    pub annotations: Option<(u64, u64)>,
    pub distance_units: f64,
    pub distance_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub schema_version: u32,
    pub name: String,
    pub created: String,
    pub frames_dir: Option<String>,
    pub keyframe_stats: Vec<PresetStats>,
    pub clouds: Vec<CloudRecord>,
    pub alignments: Vec<AlignmentRecord>,
    pub annotations: Vec<EvidenceAnnotation>,
    pub measurements: Vec<Measurement>,
    /// Millimetres per scene unit.
    pub metric_scale: Option<f64>,
    /// Next annotation id; only ever grows, so ids are never reused.
    pub next_annotation_id: u64,
    pub next_measurement_id: u64,
}

fn finite(p: &Point3) -> bool {
    p.iter().all(|v| v.is_finite())
}

impl Project {
    pub fn new(name: impl Into<String>, created: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            created: created.into(),
            frames_dir: None,
            keyframe_stats: Vec::new(),
            clouds: Vec::new(),
            alignments: Vec::new(),
            annotations: Vec::new(),
            measurements: Vec::new(),
            metric_scale: None,
            next_annotation_id: 1,
            next_measurement_id: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidInput(m));
        if let Some(s) = self.metric_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("metric scale {s} must be positive"));
            }
        }
        let mut ids: Vec<usize> = self.clouds.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate cloud id".into());
        }
        for a in &self.alignments {
            for id in [a.data_id, a.model_id] {
                if self.cloud(id).is_none() {
                    return bad(format!("alignment references unknown cloud {id}"));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.annotations {
            if a.id == 0 || a.id >= self.next_annotation_id || !seen.insert(a.id) {
                return bad(format!("annotation id {} is invalid or duplicated", a.id));
            }
        }
        for m in &self.measurements {
            if !(finite(&m.p1) && finite(&m.p2)) || ((m.p2 - m.p1).norm() - m.distance_units).abs() > 1e-9 {
                return bad(format!("measurement {} is inconsistent with its endpoints", m.id));
            }
        }
        Ok(())
    }

    pub fn cloud(&self, id: usize) -> Option<&CloudRecord> {
        self.clouds.iter().find(|c| c.id == id)
    }

    /// Register a cloud file and return its id (one above the largest).
    pub fn add_cloud(
        &mut self,
        path: impl Into<String>,
        source: impl Into<String>,
        point_count: usize,
        reconstruction: Option<ReconstructionSummary>,
    ) -> usize {
        let id = self.clouds.iter().map(|c| c.id + 1).max().unwrap_or(0);
        self.clouds.push(CloudRecord {
            id,
            path: path.into(),
            source: source.into(),
            point_count,
            reconstruction,
        });
        id
    }

    pub fn add_annotation(
        &mut self,
        anchor: Point3,
        label: &str,
        author: &str,
        comment: &str,
        timestamp: &str,
    ) -> Result<EvidenceAnnotation, SceneError> {
        if !finite(&anchor) {
            return Err(SceneError::InvalidInput("annotation anchor is not finite".into()));
        }
        let id = self.next_annotation_id.max(self.annotations.iter().map(|a| a.id + 1).max().unwrap_or(1));
        self.next_annotation_id = id + 1;
        let a = EvidenceAnnotation {
            id,
            anchor,
            label: label.to_string(),
            author: author.to_string(),
            comment: comment.to_string(),
            timestamp: timestamp.to_string(),
        };
        self.annotations.push(a.clone());
        Ok(a)
    }

    pub fn delete_annotation(&mut self, id: u64) -> Result<EvidenceAnnotation, SceneError> {
        let pos = self
            .annotations
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| SceneError::NotFound(format!("annotation {id}")))?;
        Ok(self.annotations.remove(pos))
    }

    pub fn measure(&mut self, p1: Point3, p2: Point3) -> Result<Measurement, SceneError> {
        self.push_measurement(p1, p2, None)
    }

    /// Distance between the anchors of two annotations.
    pub fn measure_annotations(&mut self, a: u64, b: u64) -> Result<Measurement, SceneError> {
        let anchor = |id: u64| {
            self.annotations
                .iter()
                .find(|x| x.id == id)
                .map(|x| x.anchor)
                .ok_or_else(|| SceneError::NotFound(format!("annotation {id}")))
        };
        let (p1, p2) = (anchor(a)?, anchor(b)?);
        self.push_measurement(p1, p2, Some((a, b)))
    }

    fn push_measurement(&mut self, p1: Point3, p2: Point3, annotations: Option<(u64, u64)>) -> Result<Measurement, SceneError> {
        if !(finite(&p1) && finite(&p2)) {
            return Err(SceneError::InvalidInput("measurement endpoint is not finite".into()));
        }
        let distance_units = (p2 - p1).norm();
        let m = Measurement {
            id: self.next_measurement_id,
            p1,
            p2,
            annotations,
            distance_units,
            distance_mm: self.metric_scale.map(|s| distance_units * s),
        };
        self.next_measurement_id += 1;
        self.measurements.push(m.clone());
        Ok(m)
    }
}

pub fn project_to_json(project: &Project) -> String {
    serde_json::to_string_pretty(project).expect("project serializes") + "\n"
}

pub fn project_from_json(text: &str) -> Result<Project, SceneError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SceneError::ParseError(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| SceneError::ParseError("missing integer schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(SceneError::SchemaVersionMismatch {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let project: Project = serde_json::from_value(value).map_err(|e| SceneError::ParseError(e.to_string()))?;
    project.validate().map_err(|e| SceneError::ParseError(e.to_string()))?;
    Ok(project)
}

pub fn save_project(project: &Project, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, project_to_json(project)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_project(path: &Path) -> Result<Project, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    project_from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Txt,
    Html,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "txt" => Ok(ReportFormat::Txt),
            "html" => Ok(ReportFormat::Html),
            other => Err(format!("unknown report format '{other}' (expected txt or html)")),
        }
    }
}

/// A titled table of already formatted cells.
struct Table {
    title: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

fn point(p: &Point3) -> String {
    format!("({:.4}, {:.4}, {:.4})", p.x, p.y, p.z)
}

fn tables(project: &Project) -> Vec<Table> {
    let stats = Table {
        title: "Keyframe statistics",
        header: vec!["Preset", "Frames", "Keyframes"],
        rows: project
            .keyframe_stats
            .iter()
            .map(|s| vec![s.preset.clone(), s.stats.total_frames.to_string(), s.stats.to_string()])
            .collect(),
    };
    let clusters = Table {
        title: "Cluster reconstructions",
        header: vec!["Cloud", "Source", "Cameras", "Points", "Mean reprojection error (px)"],
        rows: project
            .clouds
            .iter()
            .filter_map(|c| {
                let r = c.reconstruction.as_ref()?;
                Some(vec![
                    c.id.to_string(),
                    c.source.clone(),
                    r.cameras.to_string(),
                    c.point_count.to_string(),
                    format!("{:.4}", r.mean_reproj_error_px),
                ])
            })
            .collect(),
    };
    let alignments = Table {
        title: "Alignments",
        header: vec!["Data", "Model", "Pairs", "Rough RMS", "Final RMS", "Iterations", "Overlap", "Cloud RMS", "Cloud max"],
        rows: project
            .alignments
            .iter()
            .map(|a| {
                let r = &a.result;
                vec![
                    a.data_id.to_string(),
                    a.model_id.to_string(),
                    a.correspondences.len().to_string(),
                    format!("{:.6}", r.rough_rms),
                    format!("{:.6}", r.final_rms),
                    r.icp_iterations.to_string(),
                    if r.no_overlap {
                        "none".to_string()
                    } else {
                        format!("{:.1}%", 100.0 * r.overlap_fraction)
                    },
                    opt(a.cloud_distance.map(|d| d.0), 6),
                    opt(a.cloud_distance.map(|d| d.1), 6),
                ]
            })
            .collect(),
    };
    let annotations = Table {
        title: "Annotations",
        header: vec!["Id", "Label", "Anchor", "Author", "Time", "Comment"],
        rows: project
            .annotations
            .iter()
            .map(|a| {
                vec![
                    a.id.to_string(),
                    a.label.clone(),
                    point(&a.anchor),
                    a.author.clone(),
                    a.timestamp.clone(),
                    a.comment.clone(),
                ]
            })
            .collect(),
    };
    let measurements = Table {
        title: "Measurements",
        header: vec!["Id", "From", "To", "Distance (units)", "Distance (mm)"],
        rows: project
            .measurements
            .iter()
            .map(|m| {
                let (from, to) = match m.annotations {
                    Some((a, b)) => (format!("#{a}"), format!("#{b}")),
                    None => (point(&m.p1), point(&m.p2)),
                };
                vec![
                    m.id.to_string(),
                    from,
                    to,
                    format!("{:.6}", m.distance_units),
                    opt(m.distance_mm, 3),
                ]
            })
            .collect(),
    };
    vec![stats, clusters, alignments, annotations, measurements]
}

fn metadata(project: &Project, generated: &str) -> Vec<(&'static str, String)> {
    vec![
        ("Project", project.name.clone()),
        ("Created", project.created.clone()),
        ("Generated", generated.to_string()),
        ("Frames", project.frames_dir.clone().unwrap_or_else(|| "-".into())),
        (
            "Metric scale",
            project.metric_scale.map_or("not set".into(), |s| format!("{s} mm per unit")),
        ),
    ]
}

const TITLE: &str = "Crime scene reconstruction report";

/// Render the report. A pure function of its inputs: `generated` is the
/// timestamp printed in the header.
pub fn generate_report(project: &Project, format: ReportFormat, generated: &str) -> String {
    match format {
        ReportFormat::Txt => text_report(project, generated),
        ReportFormat::Html => html_report(project, generated),
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n', '\t'], " ")
}

fn text_report(project: &Project, generated: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{TITLE}\n{}\n", "=".repeat(TITLE.len())).unwrap();
    for (k, v) in metadata(project, generated) {
        writeln!(out, "{:<14}{}", format!("{k}:"), one_line(&v)).unwrap();
    }
    for table in tables(project) {
        writeln!(out, "\n{}\n{}", table.title, "-".repeat(table.title.len())).unwrap();
        if table.rows.is_empty() {
            writeln!(out, "(none)").unwrap();
            continue;
        }
        let rows: Vec<Vec<String>> = table.rows.iter().map(|r| r.iter().map(|c| one_line(c)).collect()).collect();
        let widths: Vec<usize> = (0..table.header.len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([table.header[i].len()]).max().unwrap())
            .collect();
        let line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        writeln!(out, "{}", line(table.header.clone())).unwrap();
        for r in &rows {
            writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn html_report(project: &Project, generated: &str) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    writeln!(out, "<title>{} - {}</title>", TITLE, escape(&project.name)).unwrap();
    out.push_str(
        "<style>\nbody { font-family: sans-serif; margin: 2em; }\n\
         table { border-collapse: collapse; margin-bottom: 1.5em; }\n\
         th, td { border: 1px solid #888; padding: 0.25em 0.6em; text-align: left; }\n\
         th { background: #eee; }\n</style>\n</head>\n<body>\n",
    );
    writeln!(out, "<h1>{TITLE}</h1>\n<dl>").unwrap();
    for (k, v) in metadata(project, generated) {
        writeln!(out, "<dt>{k}</dt><dd>{}</dd>", escape(&v)).unwrap();
    }
    out.push_str("</dl>\n");
    for table in tables(project) {
        writeln!(out, "<h2>{}</h2>", table.title).unwrap();
        if table.rows.is_empty() {
            out.push_str("<p>(none)</p>\n");
            continue;
        }
        out.push_str("<table>\n<tr>");
        for h in &table.header {
            write!(out, "<th>{h}</th>").unwrap();
        }
        out.push_str("</tr>\n");
        for r in &table.rows {
            out.push_str("<tr>");
            for c in r {
                write!(out, "<td>{}</td>", escape(c)).unwrap();
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_ids_are_never_reused() {
        let mut p = Project::new("p", "t0");
        for i in 1..=3 {
            assert_eq!(p.add_annotation(Point3::origin(), "x", "a", "", "t").unwrap().id, i);
        }
        p.delete_annotation(2).unwrap();
        assert_eq!(p.add_annotation(Point3::origin(), "x", "a", "", "t").unwrap().id, 4);
        p.delete_annotation(4).unwrap();
        assert_eq!(p.add_annotation(Point3::origin(), "x", "a", "", "t").unwrap().id, 5);
        assert!(matches!(p.delete_annotation(4), Err(SceneError::NotFound(_))));
        assert!(p
            .add_annotation(Point3::new(f64::NAN, 0.0, 0.0), "x", "a", "", "t")
            .is_err());
    }

    #[test]
    fn measurement_examples() {
        let mut p = Project::new("p", "t0");
        let m = p.measure(Point3::origin(), Point3::new(3.0, 4.0, 0.0)).unwrap();
        assert_eq!(m.distance_units, 5.0);
        assert_eq!(m.distance_mm, None);
        assert_eq!(p.measure(Point3::new(1.0, 1.0, 1.0), Point3::new(1.0, 1.0, 1.0)).unwrap().distance_units, 0.0);
        p.metric_scale = Some(2.5);
        let m = p.measure(Point3::origin(), Point3::new(0.0, 0.0, 4.0)).unwrap();
        assert_eq!(m.distance_mm, Some(10.0));
        assert_eq!(m.id, 3);
    }

    #[test]
    fn schema_checks() {
        let p = Project::new("p", "t0");
        let text = project_to_json(&p);
        assert_eq!(project_from_json(&text).unwrap(), p);
        let future = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            project_from_json(&future),
            Err(SceneError::SchemaVersionMismatch { found: 2, .. })
        ));
        assert!(matches!(project_from_json(&text[..text.len() / 2]), Err(SceneError::ParseError(_))));
    }
}

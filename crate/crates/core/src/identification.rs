//! Closed-set identification: classifier top-1, cosine matching against enrolled
//! centroids, embedding-geometry statistics and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::features::Geometry;
use crate::losses::LossFamily;
use crate::nn::{Model, Scalar, Tensor};
use crate::training::{embed_examples, Examples};

/// Header of the report table.
pub const REPORT_HEADER: &str = "loss\tgeometry\tduration_s\ttop1_classifier\ttop1_cosine\tintra_cos\tinter_cos";

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows of `scores` `[N, K]` whose argmax equals the label.
pub fn top1_accuracy<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, _) = scores.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(scores.row(i)) == y).count();
    Ok(hits as f64 / n as f64)
}

fn unit(v: &[f64], row: usize) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        return Err(Error::DegenerateEmbedding { row, norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm centroid per speaker, kept in lexicographic speaker order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentDB {
    speakers: Vec<String>,
    centroids: Vec<Vec<f64>>,
}

impl EnrollmentDB {
    /// Mean of each speaker's embeddings, renormalized.
    pub fn from_embeddings(groups: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut centroids = Vec::new();
        for (i, (spk, embs)) in groups.iter().enumerate() {
            let first = embs
                .first()
                .ok_or_else(|| Error::Argument(format!("speaker {spk} has no embeddings")))?;
            let mut mean = vec![0.0; first.len()];
            for e in embs {
                if e.len() != mean.len() {
                    return Err(Error::Shape(format!("speaker {spk} mixes embedding sizes")));
                }
                mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
            }
            speakers.push(spk.clone());
            centroids.push(unit(&mean, i)?);
        }
        Self::from_centroids(speakers, centroids)
    }

    /// Takes already-computed centroids; they are renormalized.
    pub fn from_centroids(speakers: Vec<String>, centroids: Vec<Vec<f64>>) -> Result<Self> {
        if speakers.len() != centroids.len() {
            return Err(Error::Shape(format!("{} speakers but {} centroids", speakers.len(), centroids.len())));
        }
        if speakers.len() < 2 {
            return Err(Error::Argument("an enrollment database needs at least 2 speakers".into()));
        }
        if centroids.iter().any(|c| c.len() != centroids[0].len()) {
            return Err(Error::Shape("centroids differ in dimension".into()));
        }
        let mut pairs: Vec<(String, Vec<f64>)> = speakers
            .into_iter()
            .zip(centroids)
            .enumerate()
            .map(|(i, (s, c))| Ok((s, unit(&c, i)?)))
            .collect::<Result<_>>()?;
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Argument("duplicate speaker id in enrollment".into()));
        }
        let (speakers, centroids) = pairs.into_iter().unzip();
        Ok(Self { speakers, centroids })
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Best-matching speaker and its cosine score. The probe is renormalized first;
/// ties go to the lexicographically smaller speaker id.
pub fn identify_cosine(db: &EnrollmentDB, probe: &[f64]) -> Result<(String, f64)> {
    if db.is_empty() {
        return Err(Error::State("enrollment database is empty".into()));
    }
    if probe.len() != db.dim() {
        return Err(Error::Shape(format!("probe has dim {}, enrollment has {}", probe.len(), db.dim())));
    }
    let p = unit(probe, 0)?;
    let scores: Vec<f64> = db.centroids.iter().map(|c| dot(c, &p)).collect();
    let best = argmax(&scores);
    Ok((db.speakers[best].clone(), scores[best]))
}

/// Mean pairwise cosine within speakers and across speakers.
pub fn embedding_geometry(groups: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<(f64, f64)> {
    if groups.len() < 2 || groups.values().all(|g| g.len() < 2) {
        return Err(Error::Argument(
            "embedding geometry needs 2 speakers and one speaker with 2 embeddings".into(),
        ));
    }
    let units: Vec<Vec<Vec<f64>>> = groups
        .values()
        .map(|g| g.iter().enumerate().map(|(i, e)| unit(e, i)).collect())
        .collect::<Result<_>>()?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (a, ga) in units.iter().enumerate() {
        for (i, x) in ga.iter().enumerate() {
            for y in &ga[i + 1..] {
                intra += dot(x, y);
                n_intra += 1;
            }
            for gb in &units[a + 1..] {
                for y in gb {
                    inter += dot(x, y);
                    n_inter += 1;
                }
            }
        }
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub loss: LossFamily,
    pub geometry: Geometry,
    pub duration_s: f64,
    pub top1_classifier: f64,
    pub top1_cosine: f64,
    pub intra_cos: f64,
    pub inter_cos: f64,
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.loss, r.geometry, r.duration_s, r.top1_classifier, r.top1_cosine, r.intra_cos, r.inter_cos
        )
        .unwrap();
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse("report header is missing or wrong".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let err = || Error::Parse(format!("bad report row {line:?}"));
            if f.len() != 7 {
                return Err(err());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err());
            Ok(ReportRow {
                loss: f[0].parse()?,
                geometry: f[1].parse()?,
                duration_s: num(f[2])?,
                top1_classifier: num(f[3])?,
                top1_cosine: num(f[4])?,
                intra_cos: num(f[5])?,
                inter_cos: num(f[6])?,
            })
        })
        .collect()
}

/// Per-speaker confusion counts: `counts[true][predicted]` in speaker order.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub speakers: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(speakers: Vec<String>) -> Self {
        let k = speakers.len();
        Self {
            speakers,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Tab-separated matrix with a `true\predicted` corner cell.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for s in &self.speakers {
            write!(out, "\t{s}").unwrap();
        }
        out.push('\n');
        for (s, row) in self.speakers.iter().zip(&self.counts) {
            out.push_str(s);
            for c in row {
                write!(out, "\t{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let err = |m: &str| Error::Parse(format!("confusion table: {m}"));
        let header = lines.next().ok_or_else(|| err("empty"))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("true\\predicted") {
            return Err(err("bad corner cell"));
        }
        let speakers: Vec<String> = cols.map(str::to_string).collect();
        let mut counts = Vec::new();
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let mut f = line.split('\t');
            if f.next() != speakers.get(i).map(String::as_str) {
                return Err(err("row labels do not match the header"));
            }
            let row = f.map(|v| v.parse().map_err(|_| err("bad count"))).collect::<Result<Vec<usize>>>()?;
            if row.len() != speakers.len() {
                return Err(err("ragged row"));
            }
            counts.push(row);
        }
        if counts.len() != speakers.len() {
            return Err(err("row count does not match the header"));
        }
        Ok(Self { speakers, counts })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub row: ReportRow,
    pub confusion: Confusion,
}

/// Scores a labelled split with the classifier head and by cosine matching
/// against `db`. `speakers[label]` names each class; `db` must enroll exactly
/// those speakers.
pub fn evaluate(
    model: &Model<f32>,
    speakers: &[String],
    db: &EnrollmentDB,
    test: &Examples,
    loss: LossFamily,
    duration_s: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let geometry = test
        .geometry()
        .ok_or_else(|| Error::Config("test split is empty".into()))?;
    if speakers.len() != model.config().num_classes {
        return Err(Error::Shape(format!(
            "{} speaker names for {} classes",
            speakers.len(),
            model.config().num_classes
        )));
    }
    if let Some(&y) = test.labels().iter().find(|&&y| y >= speakers.len()) {
        return Err(Error::ClosedSet(format!("test label {y} is not an enrolled speaker")));
    }
    let emb = embed_examples(model, test, batch_size)?;
    let scores = model.head_scores(&emb)?;
    let top1_classifier = top1_accuracy(&scores, test.labels())?;

    let db_index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if db.speakers().iter().any(|s| !db_index.contains_key(s.as_str())) || db.len() != speakers.len() {
        return Err(Error::ClosedSet("enrollment does not match the classifier's speakers".into()));
    }
    let mut confusion = Confusion::new(speakers.to_vec());
    let mut cos_hits = 0;
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, &y) in test.labels().iter().enumerate() {
        let e: Vec<f64> = emb.row(i).iter().map(|&v| v as f64).collect();
        let (who, _) = identify_cosine(db, &e)?;
        if db_index[who.as_str()] == y {
            cos_hits += 1;
        }
        confusion.counts[y][argmax(scores.row(i))] += 1;
        groups.entry(speakers[y].clone()).or_default().push(e);
    }
    let (intra_cos, inter_cos) = embedding_geometry(&groups)?;
    Ok(EvalReport {
        row: ReportRow {
            loss,
            geometry,
            duration_s,
            top1_classifier,
            top1_cosine: cos_hits as f64 / test.len() as f64,
            intra_cos,
            inter_cos,
        },
        confusion,
    })
}

/// Enrollment centroids from a labelled split, speaker `speakers[label]`.
pub fn enroll(model: &Model<f32>, speakers: &[String], examples: &Examples, batch_size: usize) -> Result<EnrollmentDB> {
    let emb = embed_examples(model, examples, batch_size)?;
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, &y) in examples.labels().iter().enumerate() {
        let name = speakers
            .get(y)
            .ok_or_else(|| Error::ClosedSet(format!("label {y} has no speaker name")))?;
        groups
            .entry(name.clone())
            .or_default()
            .push(emb.row(i).iter().map(|&v| v as f64).collect());
    }
    EnrollmentDB::from_embeddings(&groups)
}

//! Append-only JSON-lines event log with an in-memory case index.
//!
//! Every mutation is one line, flushed and synced before the call returns.
//! Opening the store replays the log; a torn final line (a write that was
//! never acknowledged) is cut off, any other unparsable line is an error.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tbscreen_core::eval::{self, EvalError, MetricsReport, RocCurve, ScoreRow};
use tbscreen_core::Label;

use crate::ServiceError;

pub const LOG_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ConfirmTb,
    ConfirmHealthy,
    Uncertain,
}

impl Decision {
    /// Ground-truth label implied by the verdict; `None` for uncertain.
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::ConfirmTb => Some(Label::Tb),
            Decision::ConfirmHealthy => Some(Label::Healthy),
            Decision::Uncertain => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    Reviewed,
}

impl std::str::FromStr for CaseStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(CaseStatus::Pending),
            "reviewed" => Ok(CaseStatus::Reviewed),
            _ => Err(format!("unknown status {s:?}; expected pending or reviewed")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub decision: Decision,
    pub reviewer: String,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    CaseCreated {
        case_id: String,
        /// Relative to the data directory.
        image_ref: String,
        image_sha256: String,
        tb_score: f64,
        created_at: DateTime<Utc>,
    },
    HeatmapReady {
        case_id: String,
        heatmap_ref: String,
        at: DateTime<Utc>,
    },
    VerdictRecorded(Verdict),
}

impl Event {
    pub fn case_id(&self) -> &str {
        match self {
            Event::CaseCreated { case_id, .. } | Event::HeatmapReady { case_id, .. } => case_id,
            Event::VerdictRecorded(v) => &v.case_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Creation order, 0-based.
    pub seq: usize,
    pub image_ref: String,
    pub image_sha256: String,
    pub tb_score: f64,
    pub heatmap_ref: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Oldest first; the last entry is the active verdict.
    pub verdicts: Vec<Verdict>,
}

impl CaseRecord {
    pub fn status(&self) -> CaseStatus {
        if self.verdicts.is_empty() {
            CaseStatus::Pending
        } else {
            CaseStatus::Reviewed
        }
    }

    pub fn active_verdict(&self) -> Option<&Verdict> {
        self.verdicts.last()
    }
}

/// Worklist ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    /// Pending before reviewed, then highest score first.
    #[default]
    Triage,
    ScoreDesc,
    ScoreAsc,
    Created,
}

impl std::str::FromStr for SortKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triage" => Ok(SortKey::Triage),
            "score_desc" => Ok(SortKey::ScoreDesc),
            "score_asc" => Ok(SortKey::ScoreAsc),
            "created" => Ok(SortKey::Created),
            _ => Err(format!("unknown sort {s:?}; expected triage, score_desc, score_asc or created")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ListQuery {
    pub status: Option<CaseStatus>,
    pub sort: SortKey,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
}

impl Default for ListQuery {
    fn default() -> Self {
        Self {
            status: None,
            sort: SortKey::Triage,
            page: 1,
            page_size: 50,
        }
    }
}

pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct Page<'a> {
    pub items: Vec<&'a CaseRecord>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub pages: usize,
}

/// Operating point over reviewed cases, with verdicts as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveMetrics {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub n_reviewed: usize,
    /// Reviewed cases whose active verdict is `uncertain`; excluded from the counts.
    pub n_uncertain: usize,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    cases: BTreeMap<String, CaseRecord>,
    order: Vec<String>,
    events: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io(format!("{}: {e}", path.display()))
}

/// Parse a log, returning the events and the byte length of the valid prefix.
fn read_log(path: &Path) -> Result<(Vec<Event>, u64), ServiceError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(f);
    let mut events = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        // an unterminated tail was never acknowledged
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<Event>(line.trim_end()) {
            Ok(ev) => {
                events.push(ev);
                good += n as u64;
            }
            Err(e) => {
                return Err(ServiceError::CorruptLog {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok((events, good))
}

/// Events of a log file, for offline analysis.
pub fn replay_log(path: &Path) -> Result<Vec<Event>, ServiceError> {
    Ok(read_log(path)?.0)
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let (events, good) = read_log(&path)?;
        let mut log = OpenOptions::new().create(true).read(true).write(true).open(&path).map_err(io_err(&path))?;
        let len = log.metadata().map_err(io_err(&path))?.len();
        if len != good {
            tracing::warn!(path = %path.display(), dropped = len - good, "truncating torn log tail");
            log.set_len(good).map_err(io_err(&path))?;
            log.sync_all().map_err(io_err(&path))?;
        }
        log.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        let mut store = Self {
            dir: dir.to_path_buf(),
            log,
            cases: BTreeMap::new(),
            order: Vec::new(),
            events: 0,
        };
        for ev in events {
            store.apply(ev)?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Id the next created case will get.
    pub fn next_case_id(&self) -> String {
        format!("case-{:06}", self.order.len() + 1)
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.get(case_id)
    }

    /// Cases in creation order.
    pub fn cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.order.iter().map(|id| &self.cases[id])
    }

    fn apply(&mut self, ev: Event) -> Result<(), ServiceError> {
        match ev {
            Event::CaseCreated {
                case_id,
                image_ref,
                image_sha256,
                tb_score,
                created_at,
            } => {
                if self.cases.contains_key(&case_id) {
                    return Err(ServiceError::Conflict(format!("case {case_id} already exists")));
                }
                if !(0.0..=1.0).contains(&tb_score) {
                    return Err(ServiceError::Conflict(format!("score {tb_score} outside [0, 1]")));
                }
                self.order.push(case_id.clone());
                self.cases.insert(
                    case_id.clone(),
                    CaseRecord {
                        case_id,
                        seq: self.order.len() - 1,
                        image_ref,
                        image_sha256,
                        tb_score,
                        heatmap_ref: None,
                        created_at,
                        verdicts: Vec::new(),
                    },
                );
            }
            Event::HeatmapReady { case_id, heatmap_ref, .. } => {
                let case = self.cases.get_mut(&case_id).ok_or(ServiceError::NotFound(case_id))?;
                case.heatmap_ref = Some(heatmap_ref);
            }
            Event::VerdictRecorded(v) => {
                let case = self.cases.get_mut(&v.case_id).ok_or_else(|| ServiceError::NotFound(v.case_id.clone()))?;
                case.verdicts.push(v);
            }
        }
        self.events += 1;
        Ok(())
    }

    /// Validate, persist, then index one event.
    pub fn append(&mut self, ev: Event) -> Result<(), ServiceError> {
        match &ev {
            Event::CaseCreated { case_id, .. } if self.cases.contains_key(case_id) => {
                return Err(ServiceError::Conflict(format!("case {case_id} already exists")))
            }
            Event::HeatmapReady { case_id, .. } if !self.cases.contains_key(case_id) => {
                return Err(ServiceError::NotFound(case_id.clone()))
            }
            Event::VerdictRecorded(v) if !self.cases.contains_key(&v.case_id) => {
                return Err(ServiceError::NotFound(v.case_id.clone()))
            }
            _ => {}
        }
        let mut line = serde_json::to_string(&ev).map_err(|e| ServiceError::Io(e.to_string()))?;
        line.push('\n');
        let path = self.log_path();
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.apply(ev)
    }

    pub fn list(&self, q: &ListQuery) -> Page<'_> {
        let mut items: Vec<&CaseRecord> = self.cases().filter(|c| q.status.is_none_or(|s| c.status() == s)).collect();
        let desc = |a: &CaseRecord, b: &CaseRecord| b.tb_score.total_cmp(&a.tb_score).then(a.seq.cmp(&b.seq));
        match q.sort {
            SortKey::Triage => items.sort_by(|a, b| {
                (a.status() == CaseStatus::Reviewed)
                    .cmp(&(b.status() == CaseStatus::Reviewed))
                    .then_with(|| desc(a, b))
            }),
            SortKey::ScoreDesc => items.sort_by(|a, b| desc(a, b)),
            SortKey::ScoreAsc => items.sort_by(|a, b| a.tb_score.total_cmp(&b.tb_score).then(a.seq.cmp(&b.seq))),
            SortKey::Created => {}
        }
        let total = items.len();
        let size = q.page_size.max(1);
        let pages = total.div_ceil(size);
        let start = (q.page.max(1) - 1).saturating_mul(size).min(total);
        let items = items[start..(start + size).min(total)].to_vec();
        Page {
            items,
            total,
            page: q.page,
            page_size: size,
            pages,
        }
    }

    /// `(id, verdict label, score)` for reviewed cases with a decisive active
    /// verdict, in creation order.
    pub fn labeled_scores(&self) -> Vec<ScoreRow> {
        self.cases()
            .filter_map(|c| {
                let label = c.active_verdict()?.decision.label()?;
                Some(ScoreRow {
                    id: c.case_id.clone(),
                    label,
                    tb_score: c.tb_score,
                })
            })
            .collect()
    }

    pub fn live_metrics(&self, threshold: f64) -> LiveMetrics {
        let rows = self.labeled_scores();
        let n_reviewed = self.cases().filter(|c| c.status() == CaseStatus::Reviewed).count();
        let cm = if rows.is_empty() {
            eval::ConfusionMatrix::default()
        } else {
            let (s, l): (Vec<f64>, Vec<Label>) = rows.iter().map(|r| (r.tb_score, r.label)).unzip();
            eval::confusion_matrix(&s, &l, threshold).expect("stored scores are finite")
        };
        LiveMetrics {
            report: eval::metrics(cm, threshold),
            n_reviewed,
            n_uncertain: n_reviewed - rows.len(),
        }
    }

    pub fn roc(&self) -> Result<RocCurve, EvalError> {
        let (s, l): (Vec<f64>, Vec<Label>) = self.labeled_scores().iter().map(|r| (r.tb_score, r.label)).unzip();
        eval::roc_curve(&s, &l)
    }
}

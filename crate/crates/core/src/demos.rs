//! Labeled demonstrations and the `.demos.jsonl` file format.
//!
//! Line 1 is a header
//! `{"version":1,"system":"cartpole","state_dim":4,"state_names":[...]}`;
//! every following line is one demonstration
//! `{"id":..,"label":"positive"|"negative","source":"human"|"synthetic","t":[..],"x":[[..],..]}`.
//! States are kept in full system dimension; the ergodic projection is
//! applied when learning.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffine, SystemKind};
use crate::error::{Error, Result};
use crate::spectral::Domain;
use crate::trajectory::Trajectory;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(Error::Parse {
                line: 0,
                msg: format!("unknown label {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub label: Label,
    pub source: Source,
    pub trajectory: Trajectory,
    /// Replaces the trajectory length as the un-normalized fusion weight.
    pub weight_override: Option<f64>,
}

impl Demonstration {
    pub fn new(id: impl Into<String>, label: Label, source: Source, trajectory: Trajectory) -> Result<Self> {
        if trajectory.len() < 2 {
            return Err(Error::TooFewSamples(trajectory.len()));
        }
        Ok(Self {
            id: id.into(),
            label,
            source,
            trajectory,
            weight_override: None,
        })
    }

    pub fn system(&self) -> SystemKind {
        self.trajectory.system
    }

    pub fn duration(&self) -> f64 {
        self.trajectory.duration()
    }
}

/// Collects `(t, state)` samples for one demonstration.
#[derive(Debug, Clone)]
pub struct Recorder {
    system: SystemKind,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl Recorder {
    pub fn new(system: SystemKind) -> Self {
        Self {
            system,
            times: Vec::new(),
            states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, state: &[f64]) -> Result<()> {
        if state.len() != self.system.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.system.state_dim(),
                got: state.len(),
            });
        }
        if let Some(&prev) = self.times.last() {
            if !(t > prev) {
                return Err(Error::TimeRegression {
                    index: self.times.len(),
                    prev,
                    next: t,
                });
            }
        }
        self.times.push(t);
        self.states.push(state.to_vec());
        Ok(())
    }

    pub fn finish(self, id: impl Into<String>, label: Label, source: Source) -> Result<Demonstration> {
        if self.times.len() < 2 {
            return Err(Error::TooFewSamples(self.times.len()));
        }
        let traj = Trajectory::new(self.system, self.times, self.states)?;
        Demonstration::new(id, label, source, traj)
    }
}

/// Validates a time-ordered stream of samples into a demonstration.
pub fn record<I>(system: SystemKind, stream: I, id: impl Into<String>, label: Label, source: Source) -> Result<Demonstration>
where
    I: IntoIterator<Item = (f64, Vec<f64>)>,
{
    let mut rec = Recorder::new(system);
    for (t, x) in stream {
        rec.push(t, &x)?;
    }
    rec.finish(id, label, source)
}

/// Demonstrations of one system plus the ergodic domain and projection used
/// to learn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub system: SystemKind,
    pub demos: Vec<Demonstration>,
    pub domain: Domain,
    pub projection: Vec<usize>,
}

impl DemoSet {
    /// Empty set with the system's default ergodic domain and projection.
    pub fn new(system: SystemKind) -> Self {
        let sys = system.build();
        Self {
            system,
            demos: Vec::new(),
            domain: sys.ergodic_domain(),
            projection: sys.default_projection(),
        }
    }

    pub fn from_demos(system: SystemKind, demos: Vec<Demonstration>) -> Result<Self> {
        let mut set = Self::new(system);
        for d in demos {
            set.push(d)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, demo: Demonstration) -> Result<()> {
        demo.trajectory.require(self.system)?;
        self.demos.push(demo);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &Demonstration> {
        self.demos.iter().filter(move |d| d.label == label)
    }

    /// Splits into (positive, negative) subsets, preserving order.
    pub fn partition(&self) -> (Vec<Demonstration>, Vec<Demonstration>) {
        self.demos.iter().cloned().partition(|d| d.label == Label::Positive)
    }

    /// Subset by id, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<DemoSet> {
        let mut out = DemoSet {
            system: self.system,
            demos: Vec::new(),
            domain: self.domain.clone(),
            projection: self.projection.clone(),
        };
        for id in ids {
            let demo = self
                .demos
                .iter()
                .find(|d| &d.id == id)
                .ok_or_else(|| Error::EmptyInput(format!("no demonstration with id {id:?}")))?;
            out.demos.push(demo.clone());
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            system: self.system,
            state_dim: self.system.state_dim(),
            state_names: self.system.state_names().iter().map(|s| s.to_string()).collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for d in &self.demos {
            let line = DemoLine {
                id: d.id.clone(),
                label: d.label,
                source: d.source,
                t: d.trajectory.times.clone(),
                x: d.trajectory.states.clone(),
                weight: d.weight_override,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: "missing header".into(),
                    })
                }
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break parse_header(&line, i + 1)?;
                }
            }
        };
        let mut set = DemoSet::new(header.system);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let parsed: DemoLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let traj = Trajectory::new(header.system, parsed.t, parsed.x).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let mut demo = Demonstration::new(parsed.id, parsed.label, parsed.source, traj).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            demo.weight_override = parsed.weight;
            set.demos.push(demo);
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    system: SystemKind,
    state_dim: usize,
    state_names: Vec<String>,
}

fn parse_header(line: &str, lineno: usize) -> Result<Header> {
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    if let Some(tag) = raw.get("system").and_then(|v| v.as_str()) {
        tag.parse::<SystemKind>()?;
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("unsupported version {}", header.version),
        });
    }
    if header.state_dim != header.system.state_dim() {
        return Err(Error::Parse {
            line: lineno,
            msg: Error::DimensionMismatch {
                expected: header.system.state_dim(),
                got: header.state_dim,
            }
            .to_string(),
        });
    }
    Ok(header)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoLine {
    id: String,
    label: Label,
    source: Source,
    t: Vec<f64>,
    x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

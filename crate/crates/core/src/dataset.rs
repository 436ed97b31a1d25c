//! Sample records, the annotation index, AU-based labelling rules and coder
//! reliability.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Point2, Point3};

use crate::cloud::PointCloudFrame;
use crate::error::{Error, Result};
use crate::volume::FrameVolume;

/// Number of points in the facial landmark markup.
pub const LANDMARK_COUNT: usize = 49;

/// Header line of the annotation index.
pub const INDEX_HEADER: &str = "subject,sample,onset,apex,offset,aus,objective,nonobjective";

/// A FACS action unit, identified by its number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionUnit(u16);

impl ActionUnit {
    pub fn new(code: u16) -> Result<Self> {
        if code == 0 {
            return Err(Error::Validation("action unit codes start at 1".into()));
        }
        Ok(ActionUnit(code))
    }

    pub fn code(self) -> u16 {
        self.0
    }
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type AuSet = BTreeSet<ActionUnit>;

/// Parses a `+`-joined AU list such as `4+5+7`. Tolerates an `AU` or `A`
/// prefix on each term. The empty string is the empty set.
pub fn parse_aus(s: &str) -> Result<AuSet> {
    let s = s.trim();
    let mut out = AuSet::new();
    if s.is_empty() {
        return Ok(out);
    }
    for term in s.split('+') {
        let t = term.trim();
        let digits = t
            .strip_prefix("AU")
            .or_else(|| t.strip_prefix("au"))
            .or_else(|| t.strip_prefix('A'))
            .unwrap_or(t);
        let code: u16 = digits
            .parse()
            .map_err(|_| Error::Validation(format!("bad action unit '{t}'")))?;
        out.insert(ActionUnit::new(code)?);
    }
    Ok(out)
}

pub fn format_aus(aus: &AuSet) -> String {
    aus.iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

/// Labels usable as classification targets.
pub trait LabelClass: Copy + Eq + fmt::Debug + fmt::Display + FromStr<Err = Error> + 'static {
    /// All classes in index order. The fallback class is last.
    const ALL: &'static [Self];
    const FALLBACK: Self;

    fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }

    fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident),+ $(,)? } fallback $fallback:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl LabelClass for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];
            const FALLBACK: Self = $name::$fallback;
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $($name::$variant => stringify!($variant)),+
                };
                f.write_str(s)
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let t = s.trim();
                $(
                    if t.eq_ignore_ascii_case(stringify!($variant)) {
                        return Ok($name::$variant);
                    }
                )+
                Err(Error::Validation(format!(
                    "unknown {} label '{}'",
                    stringify!($name),
                    t
                )))
            }
        }
    };
}

label_enum!(
    /// Emotion class assigned from the AU combination alone.
    ObjectiveLabel { Happiness, Surprise, Anger, Disgust, Sadness, Others } fallback Others
);

label_enum!(
    /// Emotion class combining AUs with self-report and stimulus category.
    NonObjectiveLabel { Positive, Negative, Surprise, Others } fallback Others
);

/// One annotated micro-expression sample. Frame indices address the stored
/// clip of the sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub subject_id: String,
    pub sample_id: String,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
    pub aus: AuSet,
    pub objective_label: ObjectiveLabel,
    pub nonobjective_label: NonObjectiveLabel,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.onset > self.offset {
            return Err(Error::Validation(format!(
                "sample {}/{}: onset {} after offset {}",
                self.subject_id, self.sample_id, self.onset, self.offset
            )));
        }
        if self.apex < self.onset || self.apex > self.offset {
            return Err(Error::Validation(format!(
                "sample {}/{}: apex {} outside [{}, {}]",
                self.subject_id, self.sample_id, self.apex, self.onset, self.offset
            )));
        }
        Ok(())
    }

    /// `subject/sample`, unique within an index.
    pub fn key(&self) -> String {
        format!("{}/{}", self.subject_id, self.sample_id)
    }

    fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.subject_id,
            self.sample_id,
            self.onset,
            self.apex,
            self.offset,
            format_aus(&self.aus),
            self.objective_label,
            self.nonobjective_label
        )
    }
}

/// Parses index text. `origin` names the source in error messages.
pub fn parse_index(text: &str, origin: &str) -> Result<Vec<SampleRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == INDEX_HEADER => {}
        Some((_, h)) => {
            return Err(Error::parse(
                origin,
                1,
                format!("expected header '{INDEX_HEADER}', found '{}'", h.trim_end()),
            ))
        }
        None => return Err(Error::parse(origin, 1, "empty index file")),
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::parse(
                origin,
                row,
                format!("expected 8 columns, found {}", cols.len()),
            ));
        }
        let frame = |s: &str, what: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(origin, row, format!("bad {what} frame '{s}'")))
        };
        let rec = SampleRecord {
            subject_id: cols[0].trim().to_string(),
            sample_id: cols[1].trim().to_string(),
            onset: frame(cols[2], "onset")?,
            apex: frame(cols[3], "apex")?,
            offset: frame(cols[4], "offset")?,
            aus: parse_aus(cols[5]).map_err(|e| Error::parse(origin, row, e.to_string()))?,
            objective_label: cols[6]
                .parse()
                .map_err(|e: Error| Error::parse(origin, row, e.to_string()))?,
            nonobjective_label: cols[7]
                .parse()
                .map_err(|e: Error| Error::parse(origin, row, e.to_string()))?,
        };
        if rec.subject_id.is_empty() || rec.sample_id.is_empty() {
            return Err(Error::parse(origin, row, "empty subject or sample id"));
        }
        rec.validate()
            .map_err(|e| Error::parse(origin, row, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_index(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_index(&text, &path.display().to_string())
}

pub fn format_index(records: &[SampleRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(INDEX_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

pub fn save_index(path: &Path, records: &[SampleRecord]) -> Result<()> {
    std::fs::write(path, format_index(records)).map_err(|e| Error::io(path, e))
}

/// Micro-expression duration limits, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationRule {
    pub max_total_ms: f64,
    pub max_onset_ms: f64,
}

impl Default for DurationRule {
    fn default() -> Self {
        DurationRule {
            max_total_ms: 500.0,
            max_onset_ms: 260.0,
        }
    }
}

/// True when the total duration or the onset phase is short enough to count
/// as a micro-expression. A non-positive frame rate never validates.
pub fn validate_duration(record: &SampleRecord, frame_rate: f64) -> bool {
    validate_duration_with(record, frame_rate, DurationRule::default())
}

pub fn validate_duration_with(record: &SampleRecord, frame_rate: f64, rule: DurationRule) -> bool {
    if frame_rate <= 0.0 || !frame_rate.is_finite() {
        return false;
    }
    let total_ms = record.offset.saturating_sub(record.onset) as f64 * 1000.0 / frame_rate;
    let onset_ms = record.apex.saturating_sub(record.onset) as f64 * 1000.0 / frame_rate;
    total_ms < rule.max_total_ms || onset_ms < rule.max_onset_ms
}

/// Agreement between two coders: twice the shared AUs over the AUs scored
/// by both coders together.
pub fn coder_reliability(coder1: &AuSet, coder2: &AuSet) -> Result<f64> {
    let total = coder1.len() + coder2.len();
    if total == 0 {
        return Err(Error::UndefinedInput(
            "reliability of two empty AU sets".into(),
        ));
    }
    let agreed = coder1.intersection(coder2).count();
    Ok(2.0 * agreed as f64 / total as f64)
}

/// Pooled reliability over many samples: summed agreements over summed
/// totals.
pub fn pooled_reliability<'a>(pairs: impl IntoIterator<Item = (&'a AuSet, &'a AuSet)>) -> Result<f64> {
    let (mut agreed, mut total) = (0usize, 0usize);
    for (a, b) in pairs {
        agreed += a.intersection(b).count();
        total += a.len() + b.len();
    }
    if total == 0 {
        return Err(Error::UndefinedInput("no AUs scored".into()));
    }
    Ok(2.0 * agreed as f64 / total as f64)
}

/// One alternative of a labelling rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuPattern {
    pub aus: AuSet,
    /// When set, the pattern matches any superset ("at least" rows).
    pub at_least: bool,
}

impl AuPattern {
    pub fn matches(&self, aus: &AuSet) -> bool {
        if self.at_least {
            self.aus.is_subset(aus)
        } else {
            self.aus == *aus
        }
    }
}

impl fmt::Display for AuPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.at_least {
            f.write_str(">=")?;
        }
        f.write_str(&format_aus(&self.aus))
    }
}

/// Ordered AU-combination rules. The first matching rule wins; no match
/// yields the fallback class.
///
/// Text form, one rule per line:
///
/// ```text
/// # comment
/// Happiness: 6 | 12 | 6+12
/// Surprise: >=1+2 | >=25
/// ```
///
/// A `>=` prefix makes the alternative a subset ("at least") match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRules<L> {
    rules: Vec<(L, Vec<AuPattern>)>,
}

impl<L: LabelClass> LabelRules<L> {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (class, body) = line
                .split_once(':')
                .ok_or_else(|| Error::parse("label rules", i + 1, "expected 'CLASS: aus | ...'"))?;
            let class: L = class
                .parse()
                .map_err(|e: Error| Error::parse("label rules", i + 1, e.to_string()))?;
            let mut patterns = Vec::new();
            for alt in body.split('|') {
                let alt = alt.trim();
                if alt.is_empty() {
                    continue;
                }
                let (at_least, aus) = match alt.strip_prefix(">=") {
                    Some(rest) => (true, rest),
                    None => (false, alt),
                };
                let aus = parse_aus(aus)
                    .map_err(|e| Error::parse("label rules", i + 1, e.to_string()))?;
                patterns.push(AuPattern { aus, at_least });
            }
            rules.push((class, patterns));
        }
        Ok(LabelRules { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn classify(&self, aus: &AuSet) -> L {
        self.rules
            .iter()
            .find(|(_, pats)| pats.iter().any(|p| p.matches(aus)))
            .map(|(c, _)| *c)
            .unwrap_or(L::FALLBACK)
    }

    pub fn rules(&self) -> &[(L, Vec<AuPattern>)] {
        &self.rules
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (class, pats) in &self.rules {
            let alts: Vec<String> = pats.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("{class}: {}\n", alts.join(" | ")));
        }
        out
    }
}

/// Objective rules, read row by row from the published criteria table.
pub const DEFAULT_OBJECTIVE_RULES: &str = include_str!("../data/objective_rules.txt");
/// Non-objective rules.
pub const DEFAULT_NONOBJECTIVE_RULES: &str = include_str!("../data/nonobjective_rules.txt");

impl Default for LabelRules<ObjectiveLabel> {
    fn default() -> Self {
        Self::parse(DEFAULT_OBJECTIVE_RULES).expect("shipped objective rules parse")
    }
}

impl Default for LabelRules<NonObjectiveLabel> {
    fn default() -> Self {
        Self::parse(DEFAULT_NONOBJECTIVE_RULES).expect("shipped non-objective rules parse")
    }
}

pub fn objective_label(aus: &AuSet, table: &LabelRules<ObjectiveLabel>) -> ObjectiveLabel {
    table.classify(aus)
}

pub fn nonobjective_label(aus: &AuSet, table: &LabelRules<NonObjectiveLabel>) -> NonObjectiveLabel {
    table.classify(aus)
}

/// Everything recorded for one sample besides its annotation.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub video: FrameVolume,
    pub clouds: Vec<PointCloudFrame>,
    /// Per frame, [`LANDMARK_COUNT`] pixel positions. Empty when absent.
    pub landmarks2d: Vec<Vec<Point2<f64>>>,
    /// Per frame, [`LANDMARK_COUNT`] positions in meters. Empty when absent.
    pub landmarks3d: Vec<Vec<Point3<f64>>>,
    pub frame_rate: f64,
}

impl SampleData {
    pub fn validate(&self) -> Result<()> {
        let t = self.video.frames();
        if self.clouds.len() != t {
            return Err(Error::Validation(format!(
                "{} point clouds for {} video frames",
                self.clouds.len(),
                t
            )));
        }
        for (name, counts) in [
            ("2D", self.landmarks2d.iter().map(Vec::len).collect::<Vec<_>>()),
            ("3D", self.landmarks3d.iter().map(Vec::len).collect::<Vec<_>>()),
        ] {
            if counts.is_empty() {
                continue;
            }
            if counts.len() != t {
                return Err(Error::Validation(format!(
                    "{name} landmarks for {} frames, video has {t}",
                    counts.len()
                )));
            }
            if let Some((f, n)) = counts.iter().enumerate().find(|(_, n)| **n != LANDMARK_COUNT) {
                return Err(Error::Validation(format!(
                    "frame {f} has {n} {name} landmarks, expected {LANDMARK_COUNT}"
                )));
            }
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Validation("frame rate must be positive".into()));
        }
        Ok(())
    }
}

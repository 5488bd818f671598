//! Weak and strong label handling: CSV parsing, train/test splits, and
//! conversion between timed events and frame grids.
//!
//! File formats (no headers):
//!
//! - `weak_labels.csv` — `filename,label1 label2 ...`; an empty label field
//!   marks a negative recording.
//! - `strong_labels.csv` — `filename,onset_s,offset_s,class`; one event per
//!   row, used for evaluation only.
//! - `split.txt` — `filename,train|test`; optional explicit split listing.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// One timed event (evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct StrongEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub class: String,
}

/// One recording's metadata. A recording is negative for the detector iff
/// its weak label set is empty.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub weak_labels: BTreeSet<String>,
    pub strong_labels: Option<Vec<StrongEvent>>,
}

impl Recording {
    pub fn is_positive(&self) -> bool {
        !self.weak_labels.is_empty()
    }

    /// Weak labels must equal the classes appearing in the strong labels
    /// whenever both are present.
    pub fn validate_consistency(&self) -> Result<()> {
        if let Some(events) = &self.strong_labels {
            let strong_classes: BTreeSet<String> =
                events.iter().map(|e| e.class.clone()).collect();
            if strong_classes != self.weak_labels {
                return Err(Error::Data(format!(
                    "{}: weak labels {:?} disagree with strong-label classes {:?}",
                    self.id, self.weak_labels, strong_classes
                )));
            }
        }
        Ok(())
    }
}

/// Train/test recordings plus the ordered class vocabulary.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Recording>,
    pub test: Vec<Recording>,
    pub vocab: Vec<String>,
}

impl DatasetSplit {
    /// Lexicographic vocabulary over both splits.
    pub fn from_recordings(train: Vec<Recording>, test: Vec<Recording>) -> Self {
        let mut classes = BTreeSet::new();
        for r in train.iter().chain(&test) {
            classes.extend(r.weak_labels.iter().cloned());
        }
        DatasetSplit {
            train,
            test,
            vocab: classes.into_iter().collect(),
        }
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.vocab.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }
}

fn strip_wav(name: &str) -> String {
    name.trim().trim_end_matches(".wav").to_string()
}

/// Parse `filename,label1 label2 ...` rows, preserving file order.
/// Duplicate filenames are an error listing every offender.
pub fn parse_weak_csv(text: &str) -> Result<Vec<Recording>> {
    let mut seen = BTreeMap::new();
    let mut dups = BTreeSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let (file, labels) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("weak labels line {}: missing comma", lineno + 1))
        })?;
        let id = strip_wav(file);
        if id.is_empty() {
            return Err(Error::Data(format!(
                "weak labels line {}: empty filename",
                lineno + 1
            )));
        }
        if seen.insert(id.clone(), lineno).is_some() {
            dups.insert(id.clone());
        }
        let weak: BTreeSet<String> = labels
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        out.push(Recording {
            id,
            weak_labels: weak,
            strong_labels: None,
        });
    }
    if !dups.is_empty() {
        let list: Vec<String> = dups.into_iter().collect();
        return Err(Error::Data(format!(
            "duplicate filenames in weak labels: {}",
            list.join(", ")
        )));
    }
    Ok(out)
}

/// Parse `filename,onset_s,offset_s,class` rows into per-recording event
/// lists.
pub fn parse_strong_csv(text: &str) -> Result<BTreeMap<String, Vec<StrongEvent>>> {
    let mut out: BTreeMap<String, Vec<StrongEvent>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!(
                "strong labels line {}: expected filename,onset,offset,class",
                lineno + 1
            )));
        }
        let onset: f64 = parts[1].trim().parse().map_err(|_| {
            Error::Data(format!("strong labels line {}: bad onset", lineno + 1))
        })?;
        let offset: f64 = parts[2].trim().parse().map_err(|_| {
            Error::Data(format!("strong labels line {}: bad offset", lineno + 1))
        })?;
        if offset < onset {
            return Err(Error::Data(format!(
                "strong labels line {}: offset before onset",
                lineno + 1
            )));
        }
        out.entry(strip_wav(parts[0])).or_default().push(StrongEvent {
            onset_s: onset,
            offset_s: offset,
            class: parts[3].trim().to_string(),
        });
    }
    Ok(out)
}

/// Parse `filename,train|test` rows.
pub fn parse_split_listing(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let (file, side) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("split listing line {}: missing comma", lineno + 1))
        })?;
        let is_train = match side.trim() {
            "train" => true,
            "test" => false,
            other => {
                return Err(Error::Data(format!(
                    "split listing line {}: `{other}` is neither train nor test",
                    lineno + 1
                )));
            }
        };
        out.insert(strip_wav(file), is_train);
    }
    Ok(out)
}

/// Head count of the conventional split: the first `SPLIT_HEAD` recordings
/// (CSV order) go to the training set.
pub const SPLIT_HEAD: usize = 499;

/// Conventional split: the first [`SPLIT_HEAD`] recordings train; of the
/// remainder, recordings without strong annotations also train (they cannot
/// be evaluated) and the rest test.
pub fn split_by_convention(
    recordings: Vec<Recording>,
    has_strong: &BTreeSet<String>,
) -> (Vec<Recording>, Vec<Recording>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in recordings.into_iter().enumerate() {
        if i < SPLIT_HEAD || !has_strong.contains(&r.id) {
            train.push(r);
        } else {
            test.push(r);
        }
    }
    (train, test)
}

/// Split according to an explicit listing; every recording must be listed.
pub fn split_by_listing(
    recordings: Vec<Recording>,
    listing: &BTreeMap<String, bool>,
) -> Result<(Vec<Recording>, Vec<Recording>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in recordings {
        match listing.get(&r.id) {
            Some(true) => train.push(r),
            Some(false) => test.push(r),
            None => {
                return Err(Error::Data(format!(
                    "{} missing from the split listing",
                    r.id
                )));
            }
        }
    }
    Ok((train, test))
}

// ── Frame-grid conversion ───────────────────────────────────────────────

/// A frame is active when at least half of its hop interval
/// `[t·hop, (t+1)·hop)` overlaps the (merged) events.
pub fn rasterise(
    events: &[(f64, f64)],
    n_frames: usize,
    hop: usize,
    sample_rate: u32,
) -> Vec<bool> {
    let merged = merge_intervals(events);
    let hop_s = hop as f64 / sample_rate as f64;
    let mut grid = vec![false; n_frames];
    for (t, cell) in grid.iter_mut().enumerate() {
        let lo = t as f64 * hop_s;
        let hi = lo + hop_s;
        let mut covered = 0.0;
        for &(on, off) in &merged {
            covered += (off.min(hi) - on.max(lo)).max(0.0);
        }
        *cell = covered >= 0.5 * hop_s;
    }
    grid
}

/// Inverse of [`rasterise`]: consecutive active frames become one interval.
pub fn deframe(grid: &[bool], hop: usize, sample_rate: u32) -> Vec<(f64, f64)> {
    let hop_s = hop as f64 / sample_rate as f64;
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (t, &active) in grid.iter().enumerate() {
        match (active, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s as f64 * hop_s, t as f64 * hop_s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s as f64 * hop_s, grid.len() as f64 * hop_s));
    }
    out
}

fn merge_intervals(events: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = events.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (on, off) in sorted {
        match out.last_mut() {
            Some(last) if on <= last.1 => last.1 = last.1.max(off),
            _ => out.push((on, off)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::HOP;

    #[test]
    fn weak_rows_parse_including_negatives() {
        let recs = parse_weak_csv("a.wav,\nb.wav,sp12 sp40\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert!(!recs[0].is_positive());
        assert!(recs[1].is_positive());
        assert_eq!(
            recs[1].weak_labels.iter().cloned().collect::<Vec<_>>(),
            vec!["sp12", "sp40"]
        );
    }

    #[test]
    fn duplicate_filenames_are_listed() {
        let err = parse_weak_csv("a.wav,x\nb.wav,\na.wav,y\nb.wav,z\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('a') && msg.contains('b'), "{msg}");
    }

    #[test]
    fn conventional_split_head_and_unannotated_tail() {
        // 687 rows; 14 of the last 188 lack strong annotations, giving the
        // 513/174 split.
        let recs: Vec<Recording> = (0..687)
            .map(|i| Recording {
                id: format!("r{i:04}"),
                weak_labels: BTreeSet::new(),
                strong_labels: None,
            })
            .collect();
        let mut has_strong: BTreeSet<String> =
            (499..687).map(|i| format!("r{i:04}")).collect();
        for i in (500..687).step_by(14).take(14) {
            has_strong.remove(&format!("r{i:04}"));
        }
        assert_eq!(has_strong.len(), 174);
        let (train, test) = split_by_convention(recs, &has_strong);
        assert_eq!(train.len(), 513);
        assert_eq!(test.len(), 174);
    }

    #[test]
    fn explicit_listing_split() {
        let recs = parse_weak_csv("a.wav,x\nb.wav,\nc.wav,y\n").unwrap();
        let listing = parse_split_listing("a.wav,train\nb.wav,test\nc.wav,train\n").unwrap();
        let (train, test) = split_by_listing(recs, &listing).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].id, "b");
    }

    #[test]
    fn vocabulary_is_lexicographic() {
        let recs = parse_weak_csv("a.wav,zeta alpha\nb.wav,mid\n").unwrap();
        let split = DatasetSplit::from_recordings(recs, Vec::new());
        assert_eq!(split.vocab, vec!["alpha", "mid", "zeta"]);
        assert_eq!(split.class_index("mid"), Some(1));
        assert_eq!(split.class_index("nope"), None);
    }

    #[test]
    fn rasterise_uses_half_hop_threshold() {
        let sr = 44_100u32;
        let hop_s = HOP as f64 / sr as f64;
        // Event covering 60% of frame 2 only.
        let events = [(2.0 * hop_s, 2.6 * hop_s)];
        let grid = rasterise(&events, 5, HOP, sr);
        assert_eq!(grid, vec![false, false, true, false, false]);
        // 40% coverage stays inactive.
        let events = [(2.0 * hop_s, 2.4 * hop_s)];
        let grid = rasterise(&events, 5, HOP, sr);
        assert!(!grid[2]);
    }

    #[test]
    fn grid_roundtrip_within_one_frame_per_boundary() {
        let sr = 44_100u32;
        let hop_s = HOP as f64 / sr as f64;
        let events = [(0.25f64, 0.75f64), (1.2, 1.5)];
        let n = (2.0 / hop_s).ceil() as usize;
        let grid = rasterise(&events, n, HOP, sr);
        let back = deframe(&grid, HOP, sr);
        assert_eq!(back.len(), events.len());
        for ((on, off), (bon, boff)) in events.iter().zip(&back) {
            assert!((on - bon).abs() <= hop_s, "onset {on} vs {bon}");
            assert!((off - boff).abs() <= hop_s, "offset {off} vs {boff}");
        }
        // Idempotence: rasterising the deframed intervals reproduces the grid.
        let again = rasterise(&back, n, HOP, sr);
        assert_eq!(again, grid);
    }

    #[test]
    fn consistency_check_catches_mismatch() {
        let rec = Recording {
            id: "x".into(),
            weak_labels: ["a".to_string()].into_iter().collect(),
            strong_labels: Some(vec![StrongEvent {
                onset_s: 0.0,
                offset_s: 1.0,
                class: "b".into(),
            }]),
        };
        assert!(rec.validate_consistency().is_err());
    }
}

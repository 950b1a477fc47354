//! Event log: tab-separated impression records behind a versioned header.
//!
//! ```text
//! #lifecycle-sim-events<TAB>v1<TAB>{run metadata as JSON}
//! seq<TAB>tick<TAB>user<TAB>content<TAB>surface<TAB>...
//! 0<TAB>0<TAB>1834<TAB>2017<TAB>home<TAB>...
//! ```
//!
//! Optional fields use `-`. Watch times use Rust's shortest round-trip float
//! formatting, so a read returns exactly what was written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::domain::{ArmId, ImpressionEvent, SlotKind, Stage, Surface, WatchOutcome};
use crate::metrics::RunMeta;
use crate::sim::EventSink;

pub const LOG_MAGIC: &str = "#lifecycle-sim-events";
pub const LOG_VERSION: &str = "v1";
pub const LOG_COLUMNS: [&str; 17] = [
    "seq",
    "tick",
    "user",
    "content",
    "surface",
    "position",
    "slot",
    "played",
    "watch_time_s",
    "outcome",
    "engaged",
    "arm",
    "content_arm",
    "stage",
    "genre",
    "content_created",
    "views_min",
];

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an event log or unsupported schema: found `{found}`, expected `{LOG_MAGIC}\t{LOG_VERSION}`")]
    Schema { found: String },
    #[error("bad header metadata: {0}")]
    Meta(String),
    #[error("truncated final record starting at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("corrupt record at line {line}: {message}")]
    Corrupt { line: u64, message: String },
    #[error("records out of order at line {line}")]
    Order { line: u64 },
}

fn opt_arm(a: Option<ArmId>) -> String {
    a.map_or_else(|| "-".to_string(), |a| a.0.to_string())
}

fn slot_str(s: SlotKind) -> &'static str {
    s.as_str()
}

/// Format one record without the trailing newline.
pub fn format_record(e: &ImpressionEvent) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.seq,
        e.tick,
        e.user,
        e.content,
        e.surface.as_str(),
        e.position,
        slot_str(e.slot),
        e.played as u8,
        e.watch_time_s,
        e.outcome.map_or("-", |o| o.as_str()),
        e.engaged as u8,
        opt_arm(e.arm),
        opt_arm(e.content_arm),
        e.stage.as_str(),
        e.genre,
        e.content_created,
        e.views_min,
    )
}

fn parse_field<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T, String> {
    raw.parse().map_err(|_| format!("bad {name} `{raw}`"))
}

fn parse_opt_arm(name: &str, raw: &str) -> Result<Option<ArmId>, String> {
    if raw == "-" {
        Ok(None)
    } else {
        parse_field::<u8>(name, raw).map(|a| Some(ArmId(a)))
    }
}

fn parse_bool(name: &str, raw: &str) -> Result<bool, String> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad {name} `{raw}`")),
    }
}

/// Parse one record (no trailing newline).
pub fn parse_record(line: &str) -> Result<ImpressionEvent, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != LOG_COLUMNS.len() {
        return Err(format!("expected {} fields, found {}", LOG_COLUMNS.len(), f.len()));
    }
    let slot = match f[6] {
        "fresh" => SlotKind::Fresh,
        "ranked" => SlotKind::Ranked,
        other => return Err(format!("bad slot `{other}`")),
    };
    let outcome = match f[9] {
        "-" => None,
        raw => Some(raw.parse::<WatchOutcome>().map_err(|e| e.to_string())?),
    };
    let e = ImpressionEvent {
        seq: parse_field("seq", f[0])?,
        tick: parse_field("tick", f[1])?,
        user: parse_field("user", f[2])?,
        content: parse_field("content", f[3])?,
        surface: f[4].parse::<Surface>().map_err(|e| e.to_string())?,
        position: parse_field("position", f[5])?,
        slot,
        played: parse_bool("played", f[7])?,
        watch_time_s: parse_field("watch_time_s", f[8])?,
        outcome,
        engaged: parse_bool("engaged", f[10])?,
        arm: parse_opt_arm("arm", f[11])?,
        content_arm: parse_opt_arm("content_arm", f[12])?,
        stage: f[13].parse::<Stage>().map_err(|e| e.to_string())?,
        genre: parse_field("genre", f[14])?,
        content_created: parse_field("content_created", f[15])?,
        views_min: parse_field("views_min", f[16])?,
    };
    if e.outcome.is_some() != e.played {
        return Err("outcome must be present exactly when played".into());
    }
    if e.engaged && e.outcome != Some(WatchOutcome::Successful) {
        return Err("engaged requires a successful play".into());
    }
    Ok(e)
}

/// Streaming writer. I/O errors are held until [`EventLogWriter::finish`].
pub struct EventLogWriter<W: Write> {
    out: BufWriter<W>,
    error: Option<std::io::Error>,
}

impl EventLogWriter<File> {
    pub fn create(path: &Path, meta: &RunMeta) -> Result<Self, EventLogError> {
        Self::new(File::create(path)?, meta)
    }
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(inner: W, meta: &RunMeta) -> Result<Self, EventLogError> {
        let mut out = BufWriter::with_capacity(1 << 20, inner);
        let json = serde_json::to_string(meta).map_err(|e| EventLogError::Meta(e.to_string()))?;
        writeln!(out, "{LOG_MAGIC}\t{LOG_VERSION}\t{json}")?;
        writeln!(out, "{}", LOG_COLUMNS.join("\t"))?;
        Ok(Self { out, error: None })
    }

    pub fn write(&mut self, e: &ImpressionEvent) -> Result<(), EventLogError> {
        writeln!(self.out, "{}", format_record(e))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, EventLogError> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.into_inner().map_err(|e| EventLogError::Io(e.into_error()))
    }
}

impl<W: Write> EventSink for EventLogWriter<W> {
    fn record(&mut self, e: &ImpressionEvent) {
        if self.error.is_none() {
            if let Err(err) = writeln!(self.out, "{}", format_record(e)) {
                self.error = Some(err);
            }
        }
    }
}

pub fn write_event_log(path: &Path, meta: &RunMeta, events: &[ImpressionEvent]) -> Result<(), EventLogError> {
    let mut w = EventLogWriter::create(path, meta)?;
    for e in events {
        w.write(e)?;
    }
    w.finish()?;
    Ok(())
}

/// Read a log, handing each record to `f` in file order.
pub fn read_events_with<R: Read>(input: R, mut f: impl FnMut(ImpressionEvent)) -> Result<RunMeta, EventLogError> {
    let mut reader = BufReader::with_capacity(1 << 20, input);
    let mut line = String::new();
    let mut offset: u64 = 0;

    let n = reader.read_line(&mut line)?;
    let header = line.trim_end_matches('\n');
    let mut parts = header.splitn(3, '\t');
    let (magic, version) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if magic != LOG_MAGIC || version != LOG_VERSION {
        return Err(EventLogError::Schema { found: format!("{magic}\t{version}") });
    }
    let meta: RunMeta =
        serde_json::from_str(parts.next().unwrap_or("")).map_err(|e| EventLogError::Meta(e.to_string()))?;
    offset += n as u64;

    line.clear();
    let n = reader.read_line(&mut line)?;
    if line.trim_end_matches('\n') != LOG_COLUMNS.join("\t") {
        return Err(EventLogError::Schema { found: line.trim_end().to_string() });
    }
    offset += n as u64;

    let mut line_no: u64 = 2;
    let mut last: Option<(u32, u64)> = None;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.ends_with('\n') {
            return Err(EventLogError::Truncated { offset });
        }
        let e = parse_record(&line[..line.len() - 1])
            .map_err(|message| EventLogError::Corrupt { line: line_no, message })?;
        let key = (e.tick, e.seq);
        if last.is_some_and(|k| k >= key) {
            return Err(EventLogError::Order { line: line_no });
        }
        last = Some(key);
        offset += n as u64;
        f(e);
    }
    Ok(meta)
}

pub fn read_event_log(path: &Path) -> Result<(RunMeta, Vec<ImpressionEvent>), EventLogError> {
    let mut events = Vec::new();
    let meta = read_events_with(File::open(path)?, |e| events.push(e))?;
    Ok((meta, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsConfig;

    pub(crate) fn meta() -> RunMeta {
        RunMeta {
            seed: 1,
            horizon: 10,
            catalog: 0,
            genres: vec!["g".into()],
            design: None,
            arms: vec![],
            arm_weights: vec![],
            experiment_surfaces: None,
            metrics: MetricsConfig::default(),
        }
    }

    fn event(seq: u64) -> ImpressionEvent {
        ImpressionEvent {
            seq,
            tick: 3,
            user: 9,
            content: 4,
            surface: Surface::Grid,
            position: 2,
            slot: SlotKind::Fresh,
            played: true,
            watch_time_s: 12.345_678_901_234_5,
            outcome: Some(WatchOutcome::Partial),
            engaged: false,
            arm: Some(ArmId(1)),
            content_arm: None,
            stage: Stage::Early,
            genre: 0,
            content_created: 1,
            views_min: 100,
        }
    }

    fn write_to_vec(events: &[ImpressionEvent]) -> Vec<u8> {
        let mut w = EventLogWriter::new(Vec::new(), &meta()).unwrap();
        for e in events {
            w.write(e).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn empty_log_round_trip() {
        let bytes = write_to_vec(&[]);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let mut n = 0;
        let m = read_events_with(&bytes[..], |_| n += 1).unwrap();
        assert_eq!(m, meta());
        assert_eq!(n, 0);
    }

    #[test]
    fn record_round_trip() {
        let events = vec![event(0), event(1)];
        let bytes = write_to_vec(&events);
        let mut back = Vec::new();
        read_events_with(&bytes[..], |e| back.push(e)).unwrap();
        assert_eq!(back, events);
    }

    #[test]
    fn schema_mismatch() {
        let bytes = write_to_vec(&[event(0)]);
        let text = String::from_utf8(bytes).unwrap().replacen("\tv1\t", "\tv9\t", 1);
        let err = read_events_with(text.as_bytes(), |_| {}).unwrap_err();
        assert!(matches!(err, EventLogError::Schema { .. }), "{err}");
    }

    #[test]
    fn truncated_final_line_reports_offset() {
        let bytes = write_to_vec(&[event(0), event(1)]);
        let text = String::from_utf8(bytes).unwrap();
        let second = text.rfind("\n1\t").unwrap() + 1;
        let cut = &text[..text.len() - 5];
        match read_events_with(cut.as_bytes(), |_| {}).unwrap_err() {
            EventLogError::Truncated { offset } => assert_eq!(offset, second as u64),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn corrupt_record_reports_line() {
        let bytes = write_to_vec(&[event(0), event(1), event(2)]);
        let text = String::from_utf8(bytes).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replace("grid", "tv");
        let broken = lines.join("\n") + "\n";
        match read_events_with(broken.as_bytes(), |_| {}).unwrap_err() {
            EventLogError::Corrupt { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("tv"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn out_of_order_records_rejected() {
        let bytes = write_to_vec(&[event(1), event(0)]);
        assert!(matches!(read_events_with(&bytes[..], |_| {}), Err(EventLogError::Order { line: 4 })));
    }
}

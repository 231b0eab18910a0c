//! Line-delimited JSON trajectory logs.
//!
//! Line 1 is a header, every later line is one trajectory:
//!
//! ```text
//! {"format":"m3rec-log","version":1,"n_items":200,"k":5}
//! {"user_id":0,"steps":[{"slate":[4,17,3],"click":17,"reward":1.25}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use m3rec_core::data::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const LOG_FORMAT: &str = "m3rec-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub n_items: usize,
    /// Largest slate size in the file.
    pub k: usize,
}

impl LogHeader {
    pub fn new(n_items: usize, k: usize) -> Self {
        Self {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            n_items,
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogFile {
    pub header: LogHeader,
    pub trajectories: Vec<Trajectory>,
}

pub fn write_logs_to(mut w: impl Write, header: &LogHeader, trajectories: &[Trajectory]) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_logs(path: &Path, header: &LogHeader, trajectories: &[Trajectory]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let f = File::create(path).map_err(io(path))?;
    write_logs_to(BufWriter::new(f), header, trajectories).map_err(io(path))
}

/// Parses and validates a log. `source` names the input in errors.
pub fn read_logs_from(r: impl BufRead, source: &str) -> Result<LogFile> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.into(),
        line,
        msg,
    };
    let mut lines = r.lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| err(1, e.to_string()))?,
        None => return Err(err(1, "missing header".into())),
    };
    let header: LogHeader = serde_json::from_str(&first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format != LOG_FORMAT || header.version != LOG_VERSION {
        return Err(err(
            1,
            format!("unsupported format {:?} version {}", header.format, header.version),
        ));
    }
    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        for (s, step) in t.steps.iter().enumerate() {
            step.validate()
                .map_err(|e| err(n, format!("user {} step {s}: {e}", t.user_id)))?;
            if let Some(&bad) = step.slate.iter().find(|&&x| x >= header.n_items) {
                return Err(err(
                    n,
                    format!("user {} step {s}: item {bad} outside catalog of {}", t.user_id, header.n_items),
                ));
            }
            if step.slate.len() > header.k {
                return Err(err(
                    n,
                    format!("user {} step {s}: slate of {} exceeds k = {}", t.user_id, step.slate.len(), header.k),
                ));
            }
        }
        trajectories.push(t);
    }
    Ok(LogFile { header, trajectories })
}

pub fn read_logs(path: &Path) -> Result<LogFile> {
    let f = File::open(path).map_err(io(path))?;
    read_logs_from(BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use m3rec_core::data::StepRecord;

    fn sample() -> Vec<Trajectory> {
        vec![
            Trajectory {
                user_id: 3,
                steps: vec![
                    StepRecord {
                        slate: vec![0, 2, 1],
                        click: 2,
                        reward: 0.1 + 0.2,
                    },
                    StepRecord {
                        slate: vec![4, 3],
                        click: 4,
                        reward: 1e-300,
                    },
                ],
            },
            Trajectory::new(9),
        ]
    }

    fn round_trip(t: &[Trajectory]) -> (Vec<u8>, LogFile) {
        let mut buf = Vec::new();
        write_logs_to(&mut buf, &LogHeader::new(5, 3), t).unwrap();
        let back = read_logs_from(buf.as_slice(), "mem").unwrap();
        (buf, back)
    }

    #[test]
    fn round_trip_is_lossless() {
        let (_, back) = round_trip(&sample());
        assert_eq!(back.trajectories, sample());
        assert_eq!(back.header, LogHeader::new(5, 3));
    }

    #[test]
    fn empty_list_is_header_only() {
        let (buf, back) = round_trip(&[]);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"format\":\"m3rec-log\",\"version\":1,\"n_items\":5,\"k\":3}\n");
        assert!(back.trajectories.is_empty());
    }

    #[test]
    fn corrupted_line_is_cited() {
        let many: Vec<Trajectory> = (0..6).map(|u| Trajectory { user_id: u, ..sample()[0].clone() }).collect();
        let (buf, _) = round_trip(&many);
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        lines[4] = "{\"user_id\":3,\"steps\":[{\"slate\":[0".into();
        let text = lines.join("\n");
        let e = read_logs_from(text.as_bytes(), "f.jsonl").unwrap_err().to_string();
        assert!(e.starts_with("f.jsonl:5:"), "{e}");
    }

    #[test]
    fn click_outside_slate_names_user_and_step() {
        let text = "{\"format\":\"m3rec-log\",\"version\":1,\"n_items\":5,\"k\":3}\n\
                    {\"user_id\":7,\"steps\":[{\"slate\":[0,1],\"click\":1,\"reward\":1.0},{\"slate\":[0,1],\"click\":4,\"reward\":1.0}]}\n";
        let e = read_logs_from(text.as_bytes(), "f").unwrap_err().to_string();
        assert!(e.contains("f:2:") && e.contains("user 7 step 1"), "{e}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let e = read_logs_from("{\"format\":\"other\",\"version\":1,\"n_items\":5,\"k\":3}\n".as_bytes(), "f").unwrap_err();
        assert!(e.to_string().starts_with("f:1:"));
        assert!(read_logs_from("".as_bytes(), "f").is_err());
    }
}

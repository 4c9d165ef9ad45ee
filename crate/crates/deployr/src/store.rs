//! Append-only JSONL inference store.
//!
//! One [`StoreRecord`] per line. A final line without its newline is a torn
//! write: readers ignore it with a warning and opening for append cuts it
//! off. Any complete line that fails to parse is corruption and fails the
//! read with its byte offset.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use deployr_core::packet::{merge_records, InferencePacket, LabelUpdate, StoreRecord};
use deployr_core::Timestamp;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct PacketFilter {
    pub model_id: Option<String>,
    /// Inclusive lower bound on inference time.
    pub from: Option<Timestamp>,
    /// Exclusive upper bound on inference time.
    pub to: Option<Timestamp>,
}

impl PacketFilter {
    pub fn model(model_id: &str) -> Self {
        Self { model_id: Some(model_id.to_string()), ..Self::default() }
    }

    pub fn matches(&self, p: &InferencePacket) -> bool {
        self.model_id.as_ref().is_none_or(|m| *m == p.model_id)
            && self.from.is_none_or(|t| p.inference_time >= t)
            && self.to.is_none_or(|t| p.inference_time < t)
    }
}

#[derive(Debug)]
pub struct Scan {
    pub records: Vec<StoreRecord>,
    /// Length of the valid prefix, ending just after the last newline.
    pub valid_len: u64,
    /// Bytes after the last newline.
    pub torn_bytes: u64,
}

/// Parse a store file without modifying it.
pub fn scan(path: &Path) -> Result<Scan> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(path, e)),
    }
    let valid_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let torn_bytes = (bytes.len() - valid_len) as u64;
    if torn_bytes > 0 {
        log::warn!("{}: ignoring torn final record ({torn_bytes} bytes)", path.display());
    }
    let mut records = Vec::new();
    let mut offset = 0usize;
    for line in bytes[..valid_len].split_inclusive(|&b| b == b'\n') {
        let body = &line[..line.len() - 1];
        let record = serde_json::from_slice(body).map_err(|e| Error::CorruptRecord {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: e.to_string(),
        })?;
        records.push(record);
        offset += line.len();
    }
    Ok(Scan { records, valid_len: valid_len as u64, torn_bytes })
}

#[derive(Debug)]
pub struct PacketStore {
    path: PathBuf,
    writer: Mutex<File>,
}

impl PacketStore {
    /// Open for appending, creating the file if needed and cutting off a
    /// torn tail left by an interrupted write.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let s = scan(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if s.torn_bytes > 0 {
            file.set_len(s.valid_len).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, writer: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record as a single write of a complete line.
    pub fn append(&self, record: &StoreRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|e| Error::Integrity(e.to_string()))?;
        line.push(b'\n');
        let mut f = self.writer.lock().expect("store writer poisoned");
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn append_packet(&self, packet: &InferencePacket) -> Result<()> {
        self.append(&StoreRecord::Packet(packet.clone()))
    }

    pub fn append_label(&self, update: &LabelUpdate) -> Result<()> {
        self.append(&StoreRecord::LabelUpdate(update.clone()))
    }

    pub fn records(&self) -> Result<Vec<StoreRecord>> {
        let _guard = self.writer.lock().expect("store writer poisoned");
        scan(&self.path).map(|s| s.records)
    }

    /// Packets with label updates applied, in append order.
    pub fn read_packets(&self, filter: &PacketFilter) -> Result<Vec<InferencePacket>> {
        read_packets(&self.path, filter)
    }
}

/// Read packets from a store file that may be concurrently appended to.
pub fn read_packets(path: &Path, filter: &PacketFilter) -> Result<Vec<InferencePacket>> {
    let s = scan(path)?;
    Ok(merge_records(s.records).into_iter().filter(|p| filter.matches(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use deployr_core::arm::Arm;
    use deployr_core::features::FeatureVector;
    use deployr_core::packet::{Mode, SubgroupAttributes};
    use deployr_core::time::ymd;
    use deployr_core::world::{Race, Sex};
    use deployr_core::Fingerprint;

    fn packet(i: u32) -> InferencePacket {
        InferencePacket {
            packet_id: format!("PKT{i:08}"),
            model_id: if i % 2 == 0 { "a".into() } else { "b".into() },
            patient_id: "PAT000001".into(),
            order_id: None,
            inference_time: ymd(2022, 1, 1) + chrono::TimeDelta::hours(i as i64),
            features: FeatureVector { entries: vec![(i, 1)], vocab_fingerprint: Fingerprint(1) },
            oov_count: 0,
            score: 0.5,
            arm: Arm::Display,
            arm_draw: i as u64,
            mode: Mode::Silent,
            routed: vec![],
            label: None,
            label_time: None,
            attributes: None,
        }
    }

    #[test]
    fn append_read_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let store = PacketStore::open(dir.path().join("p.jsonl")).unwrap();
        for i in 0..6 {
            store.append_packet(&packet(i)).unwrap();
        }
        let all = store.read_packets(&PacketFilter::default()).unwrap();
        assert_eq!(all.iter().map(|p| p.arm_draw).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
        assert_eq!(store.read_packets(&PacketFilter::model("a")).unwrap().len(), 3);
        let window = PacketFilter { from: Some(ymd(2022, 1, 1) + chrono::TimeDelta::hours(2)), to: Some(ymd(2022, 1, 1) + chrono::TimeDelta::hours(4)), ..Default::default() };
        assert_eq!(store.read_packets(&window).unwrap().len(), 2);
    }

    #[test]
    fn label_updates_are_separate_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = PacketStore::open(dir.path().join("p.jsonl")).unwrap();
        store.append_packet(&packet(0)).unwrap();
        store
            .append_label(&LabelUpdate {
                packet_id: "PKT00000000".into(),
                label: true,
                label_time: ymd(2022, 1, 2),
                attributes: SubgroupAttributes { sex: Sex::Female, race: Race::Black, age_over_40: false },
            })
            .unwrap();
        assert_eq!(store.records().unwrap().len(), 2);
        assert_eq!(store.read_packets(&PacketFilter::default()).unwrap()[0].label, Some(true));
    }

    #[test]
    fn interior_corruption_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let store = PacketStore::open(&path).unwrap();
        store.append_packet(&packet(0)).unwrap();
        let first_len = std::fs::metadata(&path).unwrap().len();
        drop(store);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{not json}\n").unwrap();
        drop(f);
        match read_packets(&path, &PacketFilter::default()) {
            Err(Error::CorruptRecord { offset, .. }) => assert_eq!(offset, first_len),
            other => panic!("{other:?}"),
        }
    }
}

//! Synthetic labeled corpora for smoke tests and fixtures.
//!
//! Each text mixes shared filler words with cue words specific to its
//! class, so an associative model can pick the label up from the
//! demonstrations.

use std::io::Write;
use std::path::Path;

use staicc_core::rng::StreamRng;
use staicc_core::SampleRecord;

const FILLER: [&str; 48] = [
    "the", "a", "story", "item", "report", "today", "this", "that", "was", "seems", "quite",
    "about", "some", "many", "while", "after", "before", "with", "over", "under", "again", "still",
    "every", "other", "river", "table", "window", "market", "garden", "letter", "engine", "winter",
    "paper", "forest", "station", "morning", "bridge", "yellow", "silver", "quiet", "early",
    "simple", "distant", "narrow", "plain", "round", "heavy", "open",
];

fn cue(class: usize, i: usize) -> String {
    const STEMS: [&str; 6] = ["zor", "vel", "kip", "mun", "dax", "rho"];
    format!(
        "{}{}{}",
        STEMS[class % STEMS.len()],
        class,
        ["a", "e", "i", "o"][i % 4]
    )
}

/// `n` records with labels cycling over `classes`. `label` pins every
/// record to one class (a consistent fixture).
pub fn synth_records(
    classes: usize,
    n: usize,
    seed: u64,
    label: Option<usize>,
) -> Vec<SampleRecord> {
    assert!(classes > 0, "at least one class");
    let mut rng = StreamRng::keyed("synth", &[seed, classes as u64]);
    (0..n)
        .map(|id| {
            let y = label.unwrap_or(id % classes);
            let len = 3 + rng.below(4);
            let mut words: Vec<String> = (0..len)
                .map(|_| FILLER[rng.below(FILLER.len())].to_string())
                .collect();
            for _ in 0..3 {
                let pos = rng.below(words.len() + 1);
                words.insert(pos, cue(y, rng.below(4)));
            }
            SampleRecord {
                id,
                text: words.join(" "),
                label: y,
            }
        })
        .collect()
}

/// CSV with a `text,label` header.
pub fn write_csv(path: &Path, records: &[SampleRecord]) -> std::io::Result<()> {
    write_to(std::fs::File::create(path)?, records)
}

pub fn write_to<W: Write>(out: W, records: &[SampleRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["text", "label"])?;
    for r in records {
        w.write_record([r.text.as_str(), &r.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_cued() {
        let a = synth_records(3, 30, 5, None);
        assert_eq!(a, synth_records(3, 30, 5, None));
        assert_ne!(a, synth_records(3, 30, 6, None));
        for r in &a {
            assert_eq!(r.label, r.id % 3);
            assert!(r.text.contains(&cue(r.label, 0)[..4]));
        }
        assert!(synth_records(2, 10, 0, Some(0))
            .iter()
            .all(|r| r.label == 0));
    }
}

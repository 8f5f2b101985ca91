use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub header: String,
    pub sequence: String,
}

impl FastaRecord {
    pub fn new(header: impl Into<String>, sequence: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            sequence: sequence.into(),
        }
    }
}

/// Streaming FASTA reader. Holds at most one record in memory.
///
/// Sequence lines are concatenated with all whitespace removed; `\r\n` line
/// endings and blank lines are tolerated.
pub struct FastaReader<R> {
    reader: R,
    line_no: usize,
    buf: String,
    pending_header: Option<(String, usize)>,
    done: bool,
}

impl<R: BufRead> FastaReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            line_no: 0,
            buf: String::new(),
            pending_header: None,
            done: false,
        }
    }

    fn next_line(&mut self) -> Result<Option<&str>> {
        self.buf.clear();
        if self.reader.read_line(&mut self.buf)? == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        Ok(Some(self.buf.trim_end_matches(['\n', '\r'])))
    }

    fn read_record(&mut self) -> Result<Option<FastaRecord>> {
        let (header, header_line) = match self.pending_header.take() {
            Some(h) => h,
            None => loop {
                let Some(line) = self.next_line()? else { return Ok(None) };
                if let Some(h) = line.strip_prefix('>') {
                    break (h.to_string(), self.line_no);
                }
                if !line.trim().is_empty() {
                    return Err(Error::Format {
                        line: self.line_no,
                        message: "sequence data before the first '>' header".into(),
                    });
                }
            },
        };
        let mut sequence = String::new();
        loop {
            let line_no = self.line_no + 1;
            match self.next_line()? {
                None => break,
                Some(line) => {
                    if let Some(h) = line.strip_prefix('>') {
                        self.pending_header = Some((h.to_string(), line_no));
                        break;
                    }
                    sequence.extend(line.chars().filter(|c| !c.is_whitespace()));
                }
            }
        }
        if sequence.is_empty() {
            return Err(Error::Format {
                line: header_line,
                message: format!("record {header:?} has an empty sequence"),
            });
        }
        Ok(Some(FastaRecord { header, sequence }))
    }
}

impl<R: BufRead> Iterator for FastaReader<R> {
    type Item = Result<FastaRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn parse_fasta<R: BufRead>(reader: R) -> FastaReader<R> {
    FastaReader::new(reader)
}

/// Parse a whole file into memory.
pub fn read_fasta_file(path: &std::path::Path) -> Result<Vec<FastaRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_fasta(std::io::BufReader::new(file))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_file(path))
}

/// Write records wrapped at `line_width` residues per line.
///
/// Records that could not be read back unchanged (empty or whitespace-bearing
/// sequences, multi-line headers) are rejected.
pub fn write_fasta<W: Write>(records: &[FastaRecord], mut out: W, line_width: usize) -> Result<()> {
    if line_width == 0 {
        return Err(Error::invalid("line width must be positive"));
    }
    for r in records {
        if r.header.contains(['\n', '\r']) {
            return Err(Error::invalid(format!("header {:?} spans lines", r.header)));
        }
        if r.sequence.is_empty() || r.sequence.starts_with('>') || r.sequence.contains(char::is_whitespace) {
            return Err(Error::invalid(format!(
                "record {:?} has an unwritable sequence",
                r.header
            )));
        }
        writeln!(out, ">{}", r.header)?;
        for chunk in r.sequence.as_bytes().chunks(line_width) {
            out.write_all(chunk)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Keep records whose encoded length (`residues + 2`) fits in `max_len`.
pub fn filter_by_length(records: Vec<FastaRecord>, max_len: usize) -> Vec<FastaRecord> {
    records
        .into_iter()
        .filter(|r| r.sequence.len() + 2 <= max_len)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Vec<FastaRecord>> {
        parse_fasta(s.as_bytes()).collect()
    }

    #[test]
    fn multi_line_sequence() {
        assert_eq!(parse(">h\nACD\nEFG\n").unwrap(), vec![FastaRecord::new("h", "ACDEFG")]);
    }

    #[test]
    fn two_records_in_order() {
        let r = parse(">a\nMK\n>b\nWW\n").unwrap();
        assert_eq!(r, vec![FastaRecord::new("a", "MK"), FastaRecord::new("b", "WW")]);
    }

    #[test]
    fn crlf_and_blank_lines() {
        let r = parse("\r\n>a x\r\nMK\r\n\r\nLV\r\n>b\r\nW").unwrap();
        assert_eq!(r, vec![FastaRecord::new("a x", "MKLV"), FastaRecord::new("b", "W")]);
    }

    #[test]
    fn data_before_header() {
        match parse("ACD\n>h\nMK\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_sequence_is_error() {
        match parse(">a\nMK\n>b\n>c\nWW\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_header_allowed() {
        assert_eq!(parse(">\nM\n").unwrap(), vec![FastaRecord::new("", "M")]);
    }

    #[test]
    fn wraps_at_line_width() {
        let mut out = Vec::new();
        write_fasta(&[FastaRecord::new("x", "A".repeat(130))], &mut out, 60).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lens: Vec<usize> = text.lines().skip(1).map(str::len).collect();
        assert_eq!(lens, vec![60, 60, 10]);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn empty_list_writes_nothing() {
        let mut out = Vec::new();
        write_fasta(&[], &mut out, 60).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn length_filter() {
        let recs = vec![
            FastaRecord::new("a", "A".repeat(509)),
            FastaRecord::new("b", "A".repeat(511)),
            FastaRecord::new("c", "A".repeat(510)),
        ];
        let kept: Vec<String> = filter_by_length(recs, 512).into_iter().map(|r| r.header).collect();
        assert_eq!(kept, vec!["a", "c"]);
    }

    proptest! {
        #[test]
        fn write_parse_round_trip(
            recs in proptest::collection::vec(("[ -~&&[^>]]{0,20}", "[ACDEFGHIKLMNPQRSTVWY]{1,200}"), 0..20),
            width in 1usize..100,
        ) {
            let records: Vec<FastaRecord> = recs.into_iter().map(|(h, s)| FastaRecord::new(h, s)).collect();
            let mut out = Vec::new();
            write_fasta(&records, &mut out, width).unwrap();
            let back = parse_fasta(&out[..]).collect::<Result<Vec<_>>>().unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn filter_matches_naive(lens in proptest::collection::vec(1usize..40, 0..50), max_len in 3usize..40) {
            let recs: Vec<FastaRecord> = lens.iter().enumerate()
                .map(|(i, &n)| FastaRecord::new(i.to_string(), "M".repeat(n)))
                .collect();
            let naive: Vec<FastaRecord> = recs.iter().filter(|r| r.sequence.len() < max_len - 1).cloned().collect();
            prop_assert_eq!(filter_by_length(recs, max_len), naive);
        }
    }
}

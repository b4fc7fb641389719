use std::path::Path;

use super::{Example, LabelA, LabelB, LabelC};
use crate::error::{DpmnError, Result};

const COLUMNS: [&str; 5] = ["id", "tweet", "subtask_a", "subtask_b", "subtask_c"];
const ABSENT: &str = "NULL";

pub fn parse_tsv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DpmnError::io(path, e))?;
    parse_tsv_str(&text)
}

/// Parses a tab-separated corpus with a header naming the five columns in
/// any order. Row numbers in errors are 1-based file lines.
pub fn parse_tsv_str(text: &str) -> Result<Vec<Example>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DpmnError::Parse {
        row: 1,
        field: "header".into(),
        message: "empty file".into(),
    })?;
    let header: Vec<&str> = header.trim_end_matches('\r').split('\t').map(str::trim).collect();
    let mut position = [0usize; 5];
    for (slot, name) in position.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| DpmnError::Parse {
                row: 1,
                field: name.into(),
                message: format!("missing column; header is {header:?}"),
            })?;
    }

    let mut examples = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(DpmnError::Parse {
                row,
                field: "<row>".into(),
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        let get = |i: usize| fields[position[i]].trim();
        let parse_err = |field: &str, message: String| DpmnError::Parse {
            row,
            field: field.into(),
            message,
        };
        let label_a: LabelA = get(2).parse().map_err(|m| parse_err("subtask_a", m))?;
        let label_b = optional::<LabelB>(get(3)).map_err(|m| parse_err("subtask_b", m))?;
        let label_c = optional::<LabelC>(get(4)).map_err(|m| parse_err("subtask_c", m))?;
        let example = Example {
            id: get(0).to_string(),
            text: fields[position[1]].to_string(),
            label_a,
            label_b,
            label_c,
        };
        example
            .check_hierarchy()
            .map_err(|message| DpmnError::Validation { row, message })?;
        examples.push(example);
    }
    Ok(examples)
}

fn optional<T: std::str::FromStr<Err = String>>(s: &str) -> std::result::Result<Option<T>, String> {
    if s.is_empty() || s == ABSENT {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// One data row in canonical column order.
pub fn to_tsv_row(ex: &Example) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        ex.id,
        ex.text,
        ex.label_a.as_str(),
        ex.label_b.map_or(ABSENT, LabelB::as_str),
        ex.label_c.map_or(ABSENT, LabelC::as_str),
    )
}

/// Header plus one row per example.
pub fn to_tsv(examples: &[Example]) -> String {
    let mut out = COLUMNS.join("\t");
    out.push('\n');
    for ex in examples {
        out.push_str(&to_tsv_row(ex));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c\n";

    #[test]
    fn parses_hierarchy_patterns() {
        let text = format!(
            "{HEADER}1\t@USER have a nice day\tNOT\tNULL\tNULL\n2\twhat a stupid day\tOFF\tUNT\tNULL\n3\t@USER you are a fool\tOFF\tTIN\tIND\n"
        );
        let ex = parse_tsv_str(&text).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!((ex[0].label_a, ex[0].label_b, ex[0].label_c), (LabelA::Not, None, None));
        assert_eq!(ex[1].label_b, Some(LabelB::Unt));
        assert_eq!(
            (ex[2].label_a, ex[2].label_b, ex[2].label_c),
            (LabelA::Off, Some(LabelB::Tin), Some(LabelC::Ind))
        );
    }

    #[test]
    fn column_order_is_free() {
        let text = "subtask_c\tsubtask_b\tsubtask_a\ttweet\tid\nGRP\tTIN\tOFF\tthey are awful\t9\n";
        let ex = parse_tsv_str(text).unwrap();
        assert_eq!(ex[0].id, "9");
        assert_eq!(ex[0].label_c, Some(LabelC::Grp));
    }

    #[test]
    fn empty_cells_are_absent() {
        let text = format!("{HEADER}1\thello\tNOT\t\t\n");
        assert_eq!(parse_tsv_str(&text).unwrap()[0].label_b, None);
    }

    #[test]
    fn hierarchy_violation_is_validation_error() {
        let text = format!("{HEADER}1\tfine\tNOT\tNULL\tNULL\n2\thello\tNOT\tTIN\tNULL\n");
        match parse_tsv_str(&text) {
            Err(DpmnError::Validation { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_row_and_field() {
        let text = format!("{HEADER}1\thello\tMAYBE\tNULL\tNULL\n");
        match parse_tsv_str(&text) {
            Err(DpmnError::Parse { row, field, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(field, "subtask_a");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{HEADER}1\thello\tNOT\n");
        assert!(matches!(parse_tsv_str(&text), Err(DpmnError::Parse { row: 2, .. })));
        assert!(matches!(
            parse_tsv_str("id\ttweet\n"),
            Err(DpmnError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn rows_re_serialize() {
        let text = format!("{HEADER}7\t@USER go away\tOFF\tTIN\tOTH\n8\tok\tNOT\tNULL\tNULL\n");
        let ex = parse_tsv_str(&text).unwrap();
        assert_eq!(to_tsv(&ex), text);
    }
}

//! A small hand-written corpus: three patients, eight reports, and two
//! gold annotation versions that disagree on a few groupings.

use rtk_core::corpus::{parse_corpus, parse_gold, Corpus, GoldAnnotations, CORPUS_COLUMNS};

struct Row {
    patient: &'static str,
    report: &'static str,
    date: &'static str,
    tag: &'static str,
    class: &'static str,
    text: &'static str,
}

const CT: &str = "CT Chest Low Dose Screening";

const ROWS: [Row; 8] = [
    Row {
        patient: "P001",
        report: "r1",
        date: "2019-03-10",
        tag: "chest_ct",
        class: CT,
        text: "EXAMINATION: CT of the chest without contrast, low dose screening.\nFINDINGS: There is a 4 mm solid nodule in the right upper lobe. A calcified granuloma is seen in the left lower lobe. No pleural effusion. No pneumothorax.\nIMPRESSION: Lung-RADS 2.",
    },
    Row {
        patient: "P001",
        report: "r2",
        date: "2020-03-15",
        tag: "chest_ct",
        class: CT,
        text: "FINDINGS: The 4 mm right upper lobe nodule is stable. Calcified granuloma in the left lower lobe is unchanged. Mild centrilobular emphysema. No pleural effusion.\nIMPRESSION: Stable.",
    },
    Row {
        patient: "P001",
        report: "r3",
        date: "2021-04-02",
        tag: "chest_xr",
        class: "XR Chest 2 Views",
        text: "FINDINGS: Lungs are clear. No focal consolidation. No pleural effusion or pneumothorax.",
    },
    Row {
        patient: "P002",
        report: "r4",
        date: "2018-06-01",
        tag: "chest_ct",
        class: CT,
        text: "FINDINGS: Ground glass opacity in the right lower lobe measuring 10 mm. Small left pleural effusion.",
    },
    Row {
        patient: "P002",
        report: "r5",
        date: "2018-09-05",
        tag: "chest_ct",
        class: CT,
        text: "FINDINGS: The right lower lobe ground glass opacity has decreased to 6 mm. The left pleural effusion has resolved.",
    },
    Row {
        patient: "P003",
        report: "r6",
        date: "2022-01-20",
        tag: "chest_ct",
        class: CT,
        text: "FINDINGS: Scarring at the lingula. 3 mm nodule in the left upper lobe. Small hiatal hernia.",
    },
    Row {
        patient: "P003",
        report: "r7",
        date: "2022-07-22",
        tag: "chest_ct",
        class: CT,
        text: "FINDINGS: Lingular scarring is unchanged. The 3 mm left upper lobe nodule is stable. No new nodules.",
    },
    Row {
        patient: "P003",
        report: "r8",
        date: "2023-01-25",
        tag: "abd_ct",
        class: "CT Abdomen Pelvis",
        text: "FINDINGS: Postsurgical changes of the abdomen. Heart size normal.",
    },
];

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// The corpus as CSV text, in the loader's column order.
pub fn synthetic_corpus_csv() -> String {
    let mut out = CORPUS_COLUMNS.join(",");
    out.push('\n');
    for r in &ROWS {
        let fields = [r.patient, r.report, r.date, r.tag, r.class, r.text];
        out.push_str(&fields.iter().map(|f| quote(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn synthetic_corpus() -> Corpus {
    parse_corpus(synthetic_corpus_csv().as_bytes()).expect("synthetic corpus parses")
}

/// (finding_id, report_id, text, version A group, version B group)
const GOLD: [(&str, &str, &str, &str, &str); 13] = [
    (
        "g01",
        "r1",
        "4 mm solid nodule in the right upper lobe",
        "a_rul",
        "b_nod",
    ),
    (
        "g02",
        "r1",
        "calcified granuloma in the left lower lobe",
        "a_gran",
        "b_nod",
    ),
    ("g03", "r2", "4 mm right upper lobe nodule is stable", "a_rul", "b_nod"),
    (
        "g04",
        "r2",
        "calcified granuloma in the left lower lobe is unchanged",
        "a_gran",
        "b_nod",
    ),
    ("g05", "r2", "mild centrilobular emphysema", "a_emph", "b_emph"),
    (
        "g06",
        "r4",
        "ground glass opacity in the right lower lobe measuring 10 mm",
        "a_ggo",
        "b_ggo",
    ),
    ("g07", "r4", "small left pleural effusion", "a_eff", "b_eff"),
    (
        "g08",
        "r5",
        "right lower lobe ground glass opacity has decreased to 6 mm",
        "a_ggo",
        "b_ggo_small",
    ),
    ("g09", "r5", "left pleural effusion has resolved", "a_eff", "b_eff"),
    ("g10", "r6", "scarring at the lingula", "a_scar", "b_scar"),
    ("g11", "r6", "3 mm nodule in the left upper lobe", "a_lul", "b_lul"),
    ("g12", "r7", "lingular scarring is unchanged", "a_scar", "b_scar"),
    ("g13", "r7", "3 mm left upper lobe nodule is stable", "a_lul", "b_lul"),
];

const NAMES_A: [(&str, &str); 7] = [
    ("a_rul", "right upper lobe nodule"),
    ("a_gran", "left lower lobe calcified granuloma"),
    ("a_emph", "centrilobular emphysema"),
    ("a_ggo", "right lower lobe ground glass opacity"),
    ("a_eff", "left pleural effusion"),
    ("a_scar", "lingula scarring"),
    ("a_lul", "left upper lobe nodule"),
];

const NAMES_B: [(&str, &str); 7] = [
    ("b_nod", "pulmonary nodules"),
    ("b_emph", "emphysema"),
    ("b_ggo", "right lower lobe ground glass opacity"),
    ("b_ggo_small", "decreasing ground glass opacity"),
    ("b_eff", "left pleural effusion"),
    ("b_scar", "lingular scarring"),
    ("b_lul", "left upper lobe nodule"),
];

/// Gold file JSON for version "A" or "B".
pub fn synthetic_gold_json(version: &str) -> String {
    let use_a = match version {
        "A" => true,
        "B" => false,
        other => panic!("no synthetic gold version `{other}`"),
    };
    let findings: Vec<serde_json::Value> = GOLD
        .iter()
        .map(|(id, report, text, a, b)| {
            serde_json::json!({
                "finding_id": id,
                "report_id": report,
                "text": text,
                "group_id": if use_a { a } else { b },
            })
        })
        .collect();
    let names = if use_a { &NAMES_A } else { &NAMES_B };
    let group_names: serde_json::Map<String, serde_json::Value> = names
        .iter()
        .map(|(id, n)| (id.to_string(), serde_json::Value::from(*n)))
        .collect();
    let doc = serde_json::json!({ "findings": findings, "group_names": group_names });
    serde_json::to_string_pretty(&doc).expect("json serializes")
}

pub fn synthetic_gold(version: &str) -> GoldAnnotations {
    parse_gold(&synthetic_gold_json(version), version).expect("synthetic gold parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape() {
        let c = synthetic_corpus();
        assert_eq!(c.patients.len(), 3);
        assert_eq!(c.reports().count(), 8);
        assert!(c.patient("P001").unwrap().report("r1").unwrap().text.contains('\n'));
    }

    #[test]
    fn gold_versions_parse() {
        assert_eq!(synthetic_gold("A").findings.len(), 13);
        assert_eq!(synthetic_gold("B").group_names.len(), 7);
    }
}

//! Dental knowledge base: a machine-readable ontology of tooth-count
//! policies, FDI region/size partitions, and numbering rules, plus the
//! semantic validation applied to structured reports.
//!
//! The ontology ships as an editable TOML file so the tables can be
//! audited and swapped without recompiling. All invariants (partition
//! totality and class sizes, count-policy ranges) are checked at load;
//! validation and prompt rendering are pure functions over the loaded,
//! immutable ontology.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("ontology file is invalid: {0}")]
    Invalid(String),
    #[error("unknown FDI code {0}")]
    UnknownCode(u16),
    #[error("unknown dentition stage `{0}`")]
    UnknownStage(String),
    #[error("failed to parse ontology: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Anterior,
    Premolar,
    Molar,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Anterior, Region::Premolar, Region::Molar];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Anterior => "anterior",
            Region::Premolar => "premolar",
            Region::Molar => "molar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Large, SizeClass::Medium, SizeClass::Small];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Large => "large",
            SizeClass::Medium => "medium",
            SizeClass::Small => "small",
        }
    }
}

pub const STAGES: [&str; 3] = ["deciduous", "mixed", "permanent"];
pub const ANOMALY_KINDS: [&str; 8] = [
    "missing",
    "extracted",
    "supernumerary",
    "denture",
    "caries",
    "crowding",
    "malocclusion",
    "other",
];
pub const ARCH_LABELS: [&str; 2] = ["upper", "lower"];

/// Expected tooth-count ranges for a dentition stage. `variable` marks the
/// transitional stage where no fixed totals apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPolicy {
    pub total: Option<(u32, u32)>,
    pub per_arch: Option<(u32, u32)>,
    pub per_quadrant: Option<(u32, u32)>,
    pub variable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DentalOntology {
    stage_policies: BTreeMap<String, CountPolicy>,
    region_map: BTreeMap<u16, Region>,
    size_map: BTreeMap<u16, SizeClass>,
    special_rules: Vec<String>,
    stage_notes: BTreeMap<String, String>,
    valid_fdi: BTreeSet<u16>,
    deciduous_fdi: BTreeSet<u16>,
}

// On-disk layout of the ontology file.
#[derive(Debug, Serialize, Deserialize)]
struct OntologyFile {
    counts: BTreeMap<String, CountsSection>,
    regions: BTreeMap<String, Vec<u16>>,
    sizes: BTreeMap<String, Vec<u16>>,
    deciduous: DeciduousSection,
    stages: BTreeMap<String, String>,
    rules: RulesSection,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountsSection {
    #[serde(default)]
    total: Option<[u32; 2]>,
    #[serde(default)]
    per_arch: Option<[u32; 2]>,
    #[serde(default)]
    per_quadrant: Option<[u32; 2]>,
    #[serde(default)]
    variable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeciduousSection {
    codes: Vec<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RulesSection {
    ordered: Vec<String>,
}

const DEFAULT_ONTOLOGY: &str = include_str!("../assets/dkb.toml");

impl DentalOntology {
    /// The bundled knowledge base.
    pub fn load_default() -> Result<Self, OntologyError> {
        Self::from_toml_str(DEFAULT_ONTOLOGY)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile =
            toml::from_str(text).map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_toml_string(&self) -> String {
        let file = OntologyFile {
            counts: self
                .stage_policies
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        CountsSection {
                            total: p.total.map(|(a, b)| [a, b]),
                            per_arch: p.per_arch.map(|(a, b)| [a, b]),
                            per_quadrant: p.per_quadrant.map(|(a, b)| [a, b]),
                            variable: p.variable,
                        },
                    )
                })
                .collect(),
            regions: Region::ALL
                .iter()
                .map(|&r| {
                    (
                        r.as_str().to_string(),
                        self.region_map
                            .iter()
                            .filter(|(_, &v)| v == r)
                            .map(|(&k, _)| k)
                            .collect(),
                    )
                })
                .collect(),
            sizes: SizeClass::ALL
                .iter()
                .map(|&s| {
                    (
                        s.as_str().to_string(),
                        self.size_map
                            .iter()
                            .filter(|(_, &v)| v == s)
                            .map(|(&k, _)| k)
                            .collect(),
                    )
                })
                .collect(),
            deciduous: DeciduousSection { codes: self.deciduous_fdi.iter().copied().collect() },
            stages: self.stage_notes.clone(),
            rules: RulesSection { ordered: self.special_rules.clone() },
        };
        toml::to_string_pretty(&file).expect("ontology serializes")
    }

    fn from_file(file: OntologyFile) -> Result<Self, OntologyError> {
        let mut region_map = BTreeMap::new();
        for (name, codes) in &file.regions {
            let region = match name.as_str() {
                "anterior" => Region::Anterior,
                "premolar" => Region::Premolar,
                "molar" => Region::Molar,
                other => return Err(OntologyError::Invalid(format!("unknown region `{other}`"))),
            };
            for &code in codes {
                if region_map.insert(code, region).is_some() {
                    return Err(OntologyError::Invalid(format!(
                        "code {code} appears in more than one region"
                    )));
                }
            }
        }
        let mut size_map = BTreeMap::new();
        for (name, codes) in &file.sizes {
            let size = match name.as_str() {
                "large" => SizeClass::Large,
                "medium" => SizeClass::Medium,
                "small" => SizeClass::Small,
                other => return Err(OntologyError::Invalid(format!("unknown size `{other}`"))),
            };
            for &code in codes {
                if size_map.insert(code, size).is_some() {
                    return Err(OntologyError::Invalid(format!(
                        "code {code} appears in more than one size class"
                    )));
                }
            }
        }

        let valid_fdi: BTreeSet<u16> = (1u16..=4)
            .flat_map(|q| (1u16..=8).map(move |p| q * 10 + p))
            .collect();

        // Partition totality and the class sizes the tables must satisfy.
        for &code in &valid_fdi {
            if !region_map.contains_key(&code) {
                return Err(OntologyError::Invalid(format!("region map misses code {code}")));
            }
            if !size_map.contains_key(&code) {
                return Err(OntologyError::Invalid(format!("size map misses code {code}")));
            }
        }
        for (map_len, name, expect) in [
            (region_map.len(), "region", 32usize),
            (size_map.len(), "size", 32usize),
        ] {
            if map_len != expect {
                return Err(OntologyError::Invalid(format!(
                    "{name} map covers {map_len} codes, expected {expect}"
                )));
            }
        }
        let class_size = |r: Region| region_map.values().filter(|&&v| v == r).count();
        if class_size(Region::Anterior) != 12
            || class_size(Region::Premolar) != 8
            || class_size(Region::Molar) != 12
        {
            return Err(OntologyError::Invalid(
                "region classes must partition the 32 codes as 12/8/12".into(),
            ));
        }
        let size_count = |s: SizeClass| size_map.values().filter(|&&v| v == s).count();
        if size_count(SizeClass::Large) != 12
            || size_count(SizeClass::Medium) != 16
            || size_count(SizeClass::Small) != 4
        {
            return Err(OntologyError::Invalid(
                "size classes must partition the 32 codes as 12/16/4".into(),
            ));
        }

        let mut stage_policies = BTreeMap::new();
        for (stage, section) in &file.counts {
            if !STAGES.contains(&stage.as_str()) {
                return Err(OntologyError::Invalid(format!("unknown stage `{stage}`")));
            }
            stage_policies.insert(
                stage.clone(),
                CountPolicy {
                    total: section.total.map(|[a, b]| (a, b)),
                    per_arch: section.per_arch.map(|[a, b]| (a, b)),
                    per_quadrant: section.per_quadrant.map(|[a, b]| (a, b)),
                    variable: section.variable,
                },
            );
        }
        for stage in STAGES {
            if !stage_policies.contains_key(stage) {
                return Err(OntologyError::Invalid(format!("missing count policy for `{stage}`")));
            }
        }
        let deciduous_policy = stage_policies["deciduous"];
        if deciduous_policy.total != Some((20, 20)) {
            return Err(OntologyError::Invalid("deciduous policy total must be 20".into()));
        }
        let permanent_policy = stage_policies["permanent"];
        match permanent_policy.total {
            Some((lo, hi)) if lo >= 28 && hi <= 32 && lo <= hi => {}
            _ => {
                return Err(OntologyError::Invalid(
                    "permanent policy total must lie within [28, 32]".into(),
                ))
            }
        }

        if file.rules.ordered.len() != 5 {
            return Err(OntologyError::Invalid(format!(
                "expected 5 numbering rules, found {}",
                file.rules.ordered.len()
            )));
        }

        let deciduous_fdi: BTreeSet<u16> = file.deciduous.codes.iter().copied().collect();
        if deciduous_fdi.len() != 20 {
            return Err(OntologyError::Invalid(format!(
                "expected 20 deciduous codes, found {}",
                deciduous_fdi.len()
            )));
        }

        Ok(DentalOntology {
            stage_policies,
            region_map,
            size_map,
            special_rules: file.rules.ordered,
            stage_notes: file.stages,
            valid_fdi,
            deciduous_fdi,
        })
    }

    pub fn region_of(&self, fdi: u16) -> Result<Region, OntologyError> {
        self.region_map.get(&fdi).copied().ok_or(OntologyError::UnknownCode(fdi))
    }

    pub fn size_of(&self, fdi: u16) -> Result<SizeClass, OntologyError> {
        self.size_map.get(&fdi).copied().ok_or(OntologyError::UnknownCode(fdi))
    }

    pub fn expected_counts(&self, stage: &str) -> Result<CountPolicy, OntologyError> {
        self.stage_policies
            .get(stage)
            .copied()
            .ok_or_else(|| OntologyError::UnknownStage(stage.to_string()))
    }

    pub fn is_valid_code(&self, fdi: u16) -> bool {
        self.valid_fdi.contains(&fdi)
    }

    pub fn is_deciduous_code(&self, fdi: u16) -> bool {
        self.deciduous_fdi.contains(&fdi)
    }

    pub fn permanent_codes(&self) -> impl Iterator<Item = u16> + '_ {
        self.valid_fdi.iter().copied()
    }

    pub fn special_rules(&self) -> &[String] {
        &self.special_rules
    }

    pub fn region_codes(&self, region: Region) -> Vec<u16> {
        self.region_map
            .iter()
            .filter(|(_, &v)| v == region)
            .map(|(&k, _)| k)
            .collect()
    }

    pub fn size_codes(&self, size: SizeClass) -> Vec<u16> {
        self.size_map
            .iter()
            .filter(|(_, &v)| v == size)
            .map(|(&k, _)| k)
            .collect()
    }

    fn stage_note(&self, stage: &str) -> &str {
        self.stage_notes.get(stage).map(String::as_str).unwrap_or("")
    }
}

/// One structured finding per arch, mirroring the report schema sent to
/// the inference backend. Label-bearing fields stay plain strings so that
/// out-of-vocabulary labels survive parsing and can be counted instead of
/// being silently rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredReport {
    pub arch: String,
    pub teeth_number: u32,
    #[serde(default)]
    pub anatomical_counts: Option<PartitionCounts>,
    #[serde(default)]
    pub size_counts: Option<SizeCounts>,
    pub dentition_stage: String,
    #[serde(default)]
    pub fdi_present: Vec<u16>,
    #[serde(default)]
    pub third_molar_evidence: bool,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    #[serde(default)]
    pub special_conditions: Vec<String>,
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionCounts {
    pub anterior: u32,
    pub premolar: u32,
    pub molar: u32,
}

impl PartitionCounts {
    pub fn sum(&self) -> u32 {
        self.anterior + self.premolar + self.molar
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeCounts {
    pub large: u32,
    pub medium: u32,
    pub small: u32,
}

impl SizeCounts {
    pub fn sum(&self) -> u32 {
        self.large + self.medium + self.small
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub kind: String,
    #[serde(default)]
    pub fdi: Option<u16>,
    #[serde(default)]
    pub position: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleId {
    ConditionalInclusion,
    NumberingContinuity,
    MorphologyStage,
    PositionalAnnotation,
    CountConsistency,
    FdiValidity,
    StageCountRange,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::ConditionalInclusion => "conditional-inclusion",
            RuleId::NumberingContinuity => "numbering-continuity",
            RuleId::MorphologyStage => "morphology-stage",
            RuleId::PositionalAnnotation => "positional-annotation",
            RuleId::CountConsistency => "count-consistency",
            RuleId::FdiValidity => "fdi-validity",
            RuleId::StageCountRange => "stage-count-range",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: RuleId,
    pub severity: Severity,
    pub detail: String,
}

fn violation(rule_id: RuleId, severity: Severity, detail: String) -> Violation {
    Violation { rule_id, severity, detail }
}

/// True when any anomaly documents the given code, either by its FDI field
/// or by naming the code in its position text.
fn documented(report: &StructuredReport, code: u16) -> bool {
    let code_text = code.to_string();
    report.anomalies.iter().any(|a| {
        a.fdi == Some(code)
            || a.position
                .as_deref()
                .map(|p| p.split(|c: char| !c.is_ascii_digit()).any(|tok| tok == code_text))
                .unwrap_or(false)
    })
}

/// Checks a syntactically complete report against the ontology's semantic
/// constraints. Violations are data, not failures; an empty list means the
/// report is consistent.
pub fn validate_report(report: &StructuredReport, ontology: &DentalOntology) -> Vec<Violation> {
    let mut out = Vec::new();
    let stage_known = STAGES.contains(&report.dentition_stage.as_str());

    // conditional inclusion: third molars need visual evidence
    if !report.third_molar_evidence {
        for &code in &report.fdi_present {
            if ontology.is_valid_code(code) && code % 10 == 8 {
                out.push(violation(
                    RuleId::ConditionalInclusion,
                    Severity::Error,
                    format!("third molar {code} reported without visual evidence"),
                ));
            }
        }
    }

    // numbering continuity: gaps below the highest reported position in a
    // quadrant must be documented as anomalies
    let mut by_quadrant: BTreeMap<u16, Vec<u16>> = BTreeMap::new();
    for &code in &report.fdi_present {
        if (11..=85).contains(&code) {
            by_quadrant.entry(code / 10).or_default().push(code % 10);
        }
    }
    for (quadrant, positions) in &by_quadrant {
        let max_pos = positions.iter().copied().max().unwrap_or(0);
        for pos in 1..max_pos {
            if !positions.contains(&pos) {
                let code = quadrant * 10 + pos;
                if !documented(report, code) {
                    out.push(violation(
                        RuleId::NumberingContinuity,
                        Severity::Error,
                        format!("gap at {code}: not reported and not documented as an anomaly"),
                    ));
                }
            }
        }
    }

    // count consistency
    if let Some(ac) = &report.anatomical_counts {
        if ac.sum() != report.teeth_number {
            out.push(violation(
                RuleId::CountConsistency,
                Severity::Error,
                format!("anatomical counts sum to {}, teeth_number is {}", ac.sum(), report.teeth_number),
            ));
        }
    }
    if let Some(sc) = &report.size_counts {
        if sc.sum() != report.teeth_number {
            out.push(violation(
                RuleId::CountConsistency,
                Severity::Error,
                format!("size counts sum to {}, teeth_number is {}", sc.sum(), report.teeth_number),
            ));
        }
    }
    if !report.fdi_present.is_empty() && report.fdi_present.len() as u32 != report.teeth_number {
        out.push(violation(
            RuleId::CountConsistency,
            Severity::Error,
            format!(
                "fdi_present lists {} codes, teeth_number is {}",
                report.fdi_present.len(),
                report.teeth_number
            ),
        ));
    }

    // fdi validity: allowed set depends on the reported stage
    if !ARCH_LABELS.contains(&report.arch.as_str()) {
        out.push(violation(
            RuleId::FdiValidity,
            Severity::Error,
            format!("arch label `{}` is neither upper nor lower", report.arch),
        ));
    }
    let allowed = |code: u16| match report.dentition_stage.as_str() {
        "permanent" => ontology.is_valid_code(code),
        "deciduous" => ontology.is_deciduous_code(code),
        _ => ontology.is_valid_code(code) || ontology.is_deciduous_code(code),
    };
    for &code in &report.fdi_present {
        if !allowed(code) {
            out.push(violation(
                RuleId::FdiValidity,
                Severity::Error,
                format!("code {code} is outside the valid set for stage `{}`", report.dentition_stage),
            ));
        }
    }
    for anomaly in &report.anomalies {
        if let Some(code) = anomaly.fdi {
            if !ontology.is_valid_code(code) && !ontology.is_deciduous_code(code) {
                out.push(violation(
                    RuleId::FdiValidity,
                    Severity::Error,
                    format!("anomaly references unknown code {code}"),
                ));
            }
        }
    }

    // stage count range: reports are single-arch, so the per-arch policy
    // applies; the transitional stage only gets a soft sanity bound
    if stage_known {
        let policy = ontology
            .expected_counts(&report.dentition_stage)
            .expect("stage known");
        if policy.variable {
            if report.teeth_number > 16 {
                out.push(violation(
                    RuleId::StageCountRange,
                    Severity::Warning,
                    format!(
                        "{} teeth exceeds any single-arch count",
                        report.teeth_number
                    ),
                ));
            }
        } else if let Some((lo, hi)) = policy.per_arch {
            if report.teeth_number < lo || report.teeth_number > hi {
                out.push(violation(
                    RuleId::StageCountRange,
                    Severity::Error,
                    format!(
                        "teeth_number {} outside the {} per-arch range [{lo}, {hi}]",
                        report.teeth_number, report.dentition_stage
                    ),
                ));
            }
        }
    }

    // positional annotation: extractions need a place; unknown anomaly
    // kinds are flagged here as annotation-vocabulary warnings
    for anomaly in &report.anomalies {
        if !ANOMALY_KINDS.contains(&anomaly.kind.as_str()) {
            out.push(violation(
                RuleId::PositionalAnnotation,
                Severity::Warning,
                format!("anomaly kind `{}` is not in the vocabulary", anomaly.kind),
            ));
        }
        if anomaly.kind == "extracted" && anomaly.fdi.is_none() && anomaly.position.is_none() {
            out.push(violation(
                RuleId::PositionalAnnotation,
                Severity::Warning,
                "extraction recorded without arch position or code".into(),
            ));
        }
    }

    // morphology-guided stage: an unknown stage label, or a stage that
    // contradicts the reported mix of deciduous and permanent codes
    if !stage_known {
        out.push(violation(
            RuleId::MorphologyStage,
            Severity::Error,
            format!("dentition stage `{}` is not in the ontology", report.dentition_stage),
        ));
    } else if !report.fdi_present.is_empty() {
        let has_deciduous = report.fdi_present.iter().any(|&c| ontology.is_deciduous_code(c));
        let has_permanent = report.fdi_present.iter().any(|&c| ontology.is_valid_code(c));
        let mixed_evidence = has_deciduous && has_permanent;
        if mixed_evidence && report.dentition_stage != "mixed" {
            out.push(violation(
                RuleId::MorphologyStage,
                Severity::Warning,
                format!(
                    "both dentitions are present but stage is `{}`",
                    report.dentition_stage
                ),
            ));
        } else if report.dentition_stage == "mixed" && !mixed_evidence {
            out.push(violation(
                RuleId::MorphologyStage,
                Severity::Warning,
                "stage is `mixed` but the codes show a single dentition".into(),
            ));
        }
    }

    out
}

/// All out-of-ontology labels carried by a report: unknown stage, anomaly
/// kind, or FDI code. Used by the hallucination metric.
pub fn out_of_ontology_labels(report: &StructuredReport, ontology: &DentalOntology) -> Vec<String> {
    let mut labels = Vec::new();
    if !STAGES.contains(&report.dentition_stage.as_str()) {
        labels.push(format!("stage:{}", report.dentition_stage));
    }
    for &code in &report.fdi_present {
        if !ontology.is_valid_code(code) && !ontology.is_deciduous_code(code) {
            labels.push(format!("fdi:{code}"));
        }
    }
    for anomaly in &report.anomalies {
        if !ANOMALY_KINDS.contains(&anomaly.kind.as_str()) {
            labels.push(format!("anomaly-kind:{}", anomaly.kind));
        }
        if let Some(code) = anomaly.fdi {
            if !ontology.is_valid_code(code) && !ontology.is_deciduous_code(code) {
                labels.push(format!("fdi:{code}"));
            }
        }
    }
    labels
}

/// JSON schema for [`StructuredReport`], with fields ordered by the five
/// reasoning stages: counting, anatomical classification, size
/// classification, stage determination, clinical conditions.
pub fn report_json_schema() -> serde_json::Value {
    serde_json::json!({
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "arch": {"type": "string", "enum": ["upper", "lower"]},
            "teeth_number": {"type": "integer", "minimum": 0},
            "anatomical_counts": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "anterior": {"type": "integer", "minimum": 0},
                    "premolar": {"type": "integer", "minimum": 0},
                    "molar": {"type": "integer", "minimum": 0}
                },
                "required": ["anterior", "premolar", "molar"]
            },
            "size_counts": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "large": {"type": "integer", "minimum": 0},
                    "medium": {"type": "integer", "minimum": 0},
                    "small": {"type": "integer", "minimum": 0}
                },
                "required": ["large", "medium", "small"]
            },
            "dentition_stage": {"type": "string", "enum": ["deciduous", "mixed", "permanent"]},
            "fdi_present": {"type": "array", "items": {"type": "integer"}},
            "third_molar_evidence": {"type": "boolean"},
            "anomalies": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": false,
                    "properties": {
                        "kind": {"type": "string", "enum": ANOMALY_KINDS},
                        "fdi": {"type": ["integer", "null"]},
                        "position": {"type": ["string", "null"]},
                        "note": {"type": ["string", "null"]}
                    },
                    "required": ["kind"]
                }
            },
            "special_conditions": {"type": "array", "items": {"type": "string"}},
            "notes": {"type": ["string", "null"]}
        },
        "required": [
            "arch", "teeth_number", "anatomical_counts", "size_counts",
            "dentition_stage", "fdi_present", "third_molar_evidence", "anomalies"
        ]
    })
}

fn codes_line(codes: &[u16]) -> String {
    codes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

/// Deterministic task prompt: the five reasoning stages in order, the
/// ontology tables, the five numbering rules verbatim from the ontology,
/// the arch-side declaration, and the required output schema.
pub fn render_prompt(ontology: &DentalOntology, arch_label: &str, task_schema: &serde_json::Value) -> String {
    let mut s = String::new();
    s.push_str("You are analyzing standardized renders of a single dental arch.\n");
    s.push_str(&format!(
        "The images show the {arch_label} dentition only, in this view order: front, back, bottom.\n\n"
    ));
    s.push_str("Work through these stages in order:\n");
    s.push_str("1. Tooth counting: identify each visible crown and count the teeth in the arch.\n");
    s.push_str("2. Anatomical classification: assign every tooth to anterior, premolar, or molar.\n");
    s.push_str("3. Size classification: assign every tooth to large, medium, or small.\n");
    s.push_str("4. Dentition stage: decide between deciduous, mixed, and permanent.\n");
    s.push_str("5. Clinical conditions: record missing teeth, prosthetics, caries, crowding, and other findings as anomalies.\n\n");

    s.push_str("Knowledge tables:\n");
    for stage in STAGES {
        let policy = ontology.expected_counts(stage).expect("bundled stages");
        let counts = if policy.variable {
            "variable count".to_string()
        } else {
            let mut parts = Vec::new();
            if let Some((lo, hi)) = policy.total {
                parts.push(if lo == hi { format!("total {lo}") } else { format!("total {lo}-{hi}") });
            }
            if let Some((lo, hi)) = policy.per_arch {
                parts.push(if lo == hi {
                    format!("{lo} per arch")
                } else {
                    format!("{lo}-{hi} per arch")
                });
            }
            if let Some((lo, hi)) = policy.per_quadrant {
                parts.push(if lo == hi {
                    format!("{lo} per quadrant")
                } else {
                    format!("{lo}-{hi} per quadrant")
                });
            }
            parts.join("; ")
        };
        s.push_str(&format!("- {stage}: {counts}. {}\n", ontology.stage_note(stage)));
    }
    s.push_str("Anatomical regions (FDI codes):\n");
    for region in Region::ALL {
        s.push_str(&format!("- {}: {}\n", region.as_str(), codes_line(&ontology.region_codes(region))));
    }
    s.push_str("Size classes (FDI codes):\n");
    for size in SizeClass::ALL {
        s.push_str(&format!("- {}: {}\n", size.as_str(), codes_line(&ontology.size_codes(size))));
    }

    s.push_str("\nRules:\n");
    for (i, rule) in ontology.special_rules().iter().enumerate() {
        s.push_str(&format!("{}. {rule}\n", i + 1));
    }

    s.push_str("\nReply with exactly one JSON object conforming to this schema, with no surrounding prose:\n");
    s.push_str(&serde_json::to_string_pretty(task_schema).expect("schema serializes"));
    s.push('\n');
    s
}

/// Minimal prompt used when knowledge guidance is disabled: the arch
/// declaration and the output schema, with no tables or rules.
pub fn render_minimal_prompt(arch_label: &str, task_schema: &serde_json::Value) -> String {
    let mut s = String::new();
    s.push_str("You are analyzing renders of a single dental arch.\n");
    s.push_str(&format!(
        "The images show the {arch_label} dentition only, in this view order: front, back, bottom.\n"
    ));
    s.push_str("Report what you observe.\n");
    s.push_str("\nReply with exactly one JSON object conforming to this schema, with no surrounding prose:\n");
    s.push_str(&serde_json::to_string_pretty(task_schema).expect("schema serializes"));
    s.push('\n');
    s
}

/// A fully consistent permanent arch without third molars: codes x1..x7 in
/// both quadrants of the arch, counts derived from the ontology tables.
pub fn baseline_report(ontology: &DentalOntology, arch_label: &str) -> StructuredReport {
    let quadrants: [u16; 2] = if arch_label == "lower" { [3, 4] } else { [1, 2] };
    let fdi_present: Vec<u16> = quadrants
        .iter()
        .flat_map(|&q| (1u16..=7).map(move |p| q * 10 + p))
        .collect();
    let mut anatomical = PartitionCounts { anterior: 0, premolar: 0, molar: 0 };
    let mut sizes = SizeCounts { large: 0, medium: 0, small: 0 };
    for &code in &fdi_present {
        match ontology.region_of(code).expect("valid code") {
            Region::Anterior => anatomical.anterior += 1,
            Region::Premolar => anatomical.premolar += 1,
            Region::Molar => anatomical.molar += 1,
        }
        match ontology.size_of(code).expect("valid code") {
            SizeClass::Large => sizes.large += 1,
            SizeClass::Medium => sizes.medium += 1,
            SizeClass::Small => sizes.small += 1,
        }
    }
    StructuredReport {
        arch: arch_label.to_string(),
        teeth_number: fdi_present.len() as u32,
        anatomical_counts: Some(anatomical),
        size_counts: Some(sizes),
        dentition_stage: "permanent".to_string(),
        fdi_present,
        third_molar_evidence: false,
        anomalies: Vec::new(),
        special_conditions: Vec::new(),
        notes: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ontology() -> DentalOntology {
        DentalOntology::load_default().unwrap()
    }

    #[test]
    fn default_ontology_loads_with_expected_partitions() {
        let o = ontology();
        assert_eq!(o.region_of(14).unwrap(), Region::Premolar);
        assert_eq!(o.region_codes(Region::Anterior).len(), 12);
        assert_eq!(o.region_codes(Region::Premolar).len(), 8);
        assert_eq!(o.region_codes(Region::Molar).len(), 12);
        assert_eq!(o.size_codes(SizeClass::Large).len(), 12);
        assert_eq!(o.size_codes(SizeClass::Medium).len(), 16);
        assert_eq!(o.size_codes(SizeClass::Small).len(), 4);
    }

    #[test]
    fn large_class_equals_molar_class() {
        let o = ontology();
        assert_eq!(o.size_codes(SizeClass::Large), o.region_codes(Region::Molar));
    }

    #[test]
    fn missing_size_code_rejected() {
        let crippled = DEFAULT_ONTOLOGY.replace(
            "medium = [11, 13, 14, 15, 21, 23, 24, 25, 31, 33, 34, 35, 41, 43, 44, 45]",
            "medium = [11, 13, 14, 15, 21, 23, 24, 25, 31, 33, 34, 35, 41, 43, 44]",
        );
        assert!(matches!(
            DentalOntology::from_toml_str(&crippled),
            Err(OntologyError::Invalid(_))
        ));
    }

    #[test]
    fn ontology_round_trips_through_toml() {
        let o = ontology();
        let text = o.to_toml_string();
        let reloaded = DentalOntology::from_toml_str(&text).unwrap();
        assert_eq!(o, reloaded);
    }

    #[test]
    fn region_lookups_match_tables() {
        let o = ontology();
        assert_eq!(o.region_of(12).unwrap(), Region::Anterior);
        assert_eq!(o.region_of(45).unwrap(), Region::Premolar);
        assert!(matches!(o.region_of(19), Err(OntologyError::UnknownCode(19))));
    }

    #[test]
    fn size_lookups_match_tables() {
        let o = ontology();
        assert_eq!(o.size_of(32).unwrap(), SizeClass::Small);
        assert_eq!(o.size_of(11).unwrap(), SizeClass::Medium);
        assert_eq!(o.size_of(37).unwrap(), SizeClass::Large);
    }

    #[test]
    fn count_policies_match_stage_definitions() {
        let o = ontology();
        let deciduous = o.expected_counts("deciduous").unwrap();
        assert_eq!(deciduous.total, Some((20, 20)));
        assert_eq!(deciduous.per_arch, Some((10, 10)));
        assert!(!deciduous.variable);
        let permanent = o.expected_counts("permanent").unwrap();
        assert_eq!(permanent.total, Some((28, 32)));
        assert_eq!(permanent.per_arch, Some((14, 16)));
        let mixed = o.expected_counts("mixed").unwrap();
        assert!(mixed.variable);
        assert_eq!(mixed.total, None);
    }

    #[test]
    fn consistent_permanent_arch_has_no_violations() {
        let o = ontology();
        let report = baseline_report(&o, "upper");
        assert_eq!(report.teeth_number, 14);
        assert_eq!(validate_report(&report, &o), Vec::new());
    }

    #[test]
    fn third_molar_without_evidence_violates_conditional_inclusion() {
        let o = ontology();
        let mut report = baseline_report(&o, "upper");
        report.fdi_present.push(18);
        report.teeth_number = 15;
        report.anatomical_counts.as_mut().unwrap().molar += 1;
        report.size_counts.as_mut().unwrap().large += 1;
        let violations = validate_report(&report, &o);
        assert!(violations
            .iter()
            .any(|v| v.rule_id == RuleId::ConditionalInclusion && v.severity == Severity::Error));
        // stage-count-range is also satisfied: 15 teeth is a legal arch
        assert!(!violations.iter().any(|v| v.rule_id == RuleId::StageCountRange));
    }

    #[test]
    fn undocumented_gap_violates_numbering_continuity() {
        let o = ontology();
        let mut report = baseline_report(&o, "upper");
        report.fdi_present.retain(|&c| c != 12);
        report.teeth_number = 13;
        report.anatomical_counts.as_mut().unwrap().anterior -= 1;
        report.size_counts.as_mut().unwrap().small -= 1;
        let violations = validate_report(&report, &o);
        assert!(violations
            .iter()
            .any(|v| v.rule_id == RuleId::NumberingContinuity && v.detail.contains("12")));
    }

    #[test]
    fn documented_gap_is_not_a_continuity_violation() {
        let o = ontology();
        let mut report = baseline_report(&o, "upper");
        report.fdi_present.retain(|&c| c != 12);
        report.teeth_number = 13;
        report.anatomical_counts.as_mut().unwrap().anterior -= 1;
        report.size_counts.as_mut().unwrap().small -= 1;
        report.anomalies.push(Anomaly {
            kind: "missing".into(),
            fdi: Some(12),
            position: None,
            note: None,
        });
        let with_doc = validate_report(&report, &o);
        assert!(!with_doc.iter().any(|v| v.rule_id == RuleId::NumberingContinuity));
        // stage range: 13 teeth in a permanent arch is below [14, 16]
        assert!(with_doc.iter().any(|v| v.rule_id == RuleId::StageCountRange));
    }

    #[test]
    fn documenting_an_anomaly_never_adds_continuity_violations() {
        let o = ontology();
        let mut report = baseline_report(&o, "lower");
        report.fdi_present.retain(|&c| c != 34 && c != 45);
        report.teeth_number = 12;
        report.anatomical_counts.as_mut().unwrap().premolar -= 2;
        report.size_counts.as_mut().unwrap().medium -= 2;
        let count = |r: &StructuredReport| {
            validate_report(r, &o)
                .iter()
                .filter(|v| v.rule_id == RuleId::NumberingContinuity)
                .count()
        };
        let before = count(&report);
        report.anomalies.push(Anomaly {
            kind: "missing".into(),
            fdi: Some(34),
            position: None,
            note: None,
        });
        let after = count(&report);
        assert!(after < before);
        assert_eq!(before, 2);
        assert_eq!(after, 1);
    }

    #[test]
    fn validation_is_idempotent_on_clean_reports() {
        let o = ontology();
        let report = baseline_report(&o, "lower");
        assert!(validate_report(&report, &o).is_empty());
        assert!(validate_report(&report, &o).is_empty());
    }

    #[test]
    fn unknown_stage_is_a_morphology_error_and_hallucination() {
        let o = ontology();
        let mut report = baseline_report(&o, "upper");
        report.dentition_stage = "chimeric".into();
        let violations = validate_report(&report, &o);
        assert!(violations
            .iter()
            .any(|v| v.rule_id == RuleId::MorphologyStage && v.severity == Severity::Error));
        let labels = out_of_ontology_labels(&report, &o);
        assert_eq!(labels, vec!["stage:chimeric".to_string()]);
    }

    #[test]
    fn mixed_codes_with_permanent_stage_warn() {
        let o = ontology();
        let mut report = baseline_report(&o, "upper");
        report.fdi_present.push(55);
        report.teeth_number += 1;
        report.anatomical_counts = None;
        report.size_counts = None;
        let violations = validate_report(&report, &o);
        assert!(violations
            .iter()
            .any(|v| v.rule_id == RuleId::MorphologyStage && v.severity == Severity::Warning));
        // 55 is legal for non-permanent stages only
        assert!(violations.iter().any(|v| v.rule_id == RuleId::FdiValidity));
    }

    #[test]
    fn prompt_contains_rules_in_order_and_arch_statement() {
        let o = ontology();
        let schema = report_json_schema();
        let prompt = render_prompt(&o, "lower", &schema);
        assert!(prompt.contains("the lower dentition only"));
        let mut last = 0;
        for rule in o.special_rules() {
            let pos = prompt.find(rule.as_str()).expect("rule present verbatim");
            assert!(pos > last, "rules must appear in order");
            last = pos;
        }
        assert!(prompt.contains("teeth_number"));
        assert!(prompt.contains("dentition_stage"));
    }

    #[test]
    fn prompt_is_deterministic() {
        let o = ontology();
        let schema = report_json_schema();
        assert_eq!(render_prompt(&o, "upper", &schema), render_prompt(&o, "upper", &schema));
    }

    #[test]
    fn minimal_prompt_omits_tables_and_rules() {
        let o = ontology();
        let schema = report_json_schema();
        let minimal = render_minimal_prompt("upper", &schema);
        assert!(!minimal.contains("Knowledge tables"));
        assert!(!minimal.contains("Rules:"));
        for rule in o.special_rules() {
            assert!(!minimal.contains(rule.as_str()));
        }
    }

    #[test]
    fn schema_orders_fields_by_reasoning_stage() {
        let schema = report_json_schema();
        let text = serde_json::to_string(&schema).unwrap();
        let order = [
            "teeth_number",
            "anatomical_counts",
            "size_counts",
            "dentition_stage",
            "anomalies",
        ];
        let mut last = 0;
        for field in order {
            let pos = text.find(&format!("\"{field}\"")).unwrap();
            assert!(pos > last, "{field} out of order");
            last = pos;
        }
    }
}

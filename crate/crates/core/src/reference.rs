//! Reference country list and indicator catalogue for the 2009–2022 panel.

use crate::panel::{IndicatorMeta, IndicatorMetadataFile};

/// Observed assessment years.
pub const OBSERVED_YEARS: [i32; 5] = [2009, 2012, 2015, 2018, 2022];

/// The 53 countries and economies with complete reading and mathematics
/// data for every observed cycle.
pub const COUNTRIES: [&str; 53] = [
    "Albania",
    "Argentina",
    "Australia",
    "Austria",
    "Belgium",
    "Brazil",
    "Bulgaria",
    "Canada",
    "Chile",
    "Colombia",
    "Croatia",
    "Czech Republic",
    "Denmark",
    "Estonia",
    "Finland",
    "France",
    "Germany",
    "Greece",
    "Hong Kong–China",
    "Hungary",
    "Iceland",
    "Indonesia",
    "Ireland",
    "Israel",
    "Italy",
    "Japan",
    "Jordan",
    "Kazakhstan",
    "Korea",
    "Latvia",
    "Lithuania",
    "Macao–China",
    "Mexico",
    "Montenegro",
    "Netherlands",
    "New Zealand",
    "Norway",
    "Peru",
    "Poland",
    "Portugal",
    "Qatar",
    "Romania",
    "Singapore",
    "Slovak Republic",
    "Slovenia",
    "Spain",
    "Sweden",
    "Switzerland",
    "Thailand",
    "Turkey",
    "United Kingdom",
    "United States",
    "Uruguay",
];

/// (name, member model, end year). Start year is 2009 for every indicator;
/// indicators ending in 2022 accept 2021 as a substitute.
pub const INDICATORS: [(&str, &str, i32); 31] = [
    ("Employment females as percentage of employment annual", "Context (Gender Gap)", 2021),
    ("Gender development index", "Context (Gender Gap)", 2022),
    ("Gender gap index GEQ", "Context (Gender Gap)", 2022),
    ("Labor force participation rate female percentage of female population", "Context (Gender Gap)", 2021),
    ("Adolescents out of school of lower-secondary age", "Outcome/Input (Education)", 2022),
    ("Children out of school of primary school age", "Outcome/Input (Education)", 2022),
    ("Gross enrollment ratio primary both sexes", "Outcome/Input (Education)", 2022),
    ("Gross enrollment ratio secondary both sexes", "Outcome/Input (Education)", 2022),
    ("Lower-secondary school starting age years", "Outcome/Input (Education)", 2022),
    ("Official entrance age to lower-secondary education years", "Outcome/Input (Education)", 2022),
    ("Official entrance age to pre-primary education years", "Outcome/Input (Education)", 2022),
    ("Official entrance age to primary education years", "Outcome/Input (Education)", 2022),
    ("GDP (standardized)", "Context (SES)", 2021),
    ("Human development index", "Context (SES)", 2022),
    ("Index highest occupational status of parents", "Context (SES)", 2022),
    ("Rural population as percentage of total population", "Context (SES)", 2022),
    ("Expected years of schooling", "Context (Education)", 2022),
    ("Funding government", "Context (Education)", 2022),
    ("Government expenditure on education percentage of GDP", "Context (Education)", 2022),
    ("Government expenditure on education percentage of government expenditure", "Context (Education)", 2022),
    ("Index school size", "Context (Education)", 2022),
    ("Percentage of full-time teachers per school", "Processes/Input (Education)", 2022),
    ("Percentage of part-time teachers per school", "Processes/Input (Education)", 2022),
    ("Number of class periods in mathematics", "Processes/Input (Education)", 2022),
    ("Primary school starting age years", "Processes/Input (Education)", 2022),
    ("Teaching hours lower secondary", "Processes/Input (Education)", 2021),
    ("Teaching hours primary", "Processes/Input (Education)", 2021),
    ("Teaching hours upper-secondary", "Processes/Input (Education)", 2021),
    ("Percentage of teachers in pre-primary education who are female", "Context (Education)", 2022),
    ("Percentage of teachers in primary education who are female", "Context (Education)", 2022),
    ("Percentage of teachers in secondary education who are female", "Context (Education)", 2022),
];

pub fn indicator_metadata() -> IndicatorMetadataFile {
    IndicatorMetadataFile {
        indicators: INDICATORS
            .iter()
            .map(|&(name, member, end)| IndicatorMeta {
                name: name.to_string(),
                end_year: end,
                substitute_year: (end == 2022).then_some(2021),
                start_year: 2009,
                member_model: Some(member.to_string()),
            })
            .collect(),
    }
}

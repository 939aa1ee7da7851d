//! Calendar-date grounding of relative time phrases.
//!
//! The memory manager's model does this resolution in production; the
//! functions here are the deterministic reference used to validate its output
//! and to drive offline backends.

use chrono::{Datelike, Duration, Months, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedDate {
    pub date: NaiveDate,
    pub rendering: String,
    pub source_phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Resolved(ResolvedDate),
    Unresolvable,
}

impl Resolution {
    pub fn date(&self) -> Option<NaiveDate> {
        match self {
            Resolution::Resolved(r) => Some(r.date),
            Resolution::Unresolvable => None,
        }
    }
}

/// Month number (1-based) for an English month name or its three-letter prefix.
pub fn month_from_name(name: &str) -> Option<u32> {
    let lower = name.trim().to_ascii_lowercase();
    if lower.len() < 3 {
        return None;
    }
    MONTHS
        .iter()
        .position(|m| {
            let m = m.to_ascii_lowercase();
            m == lower || (lower.len() <= 4 && m.starts_with(lower.trim_end_matches('.')))
        })
        .map(|i| i as u32 + 1)
}

/// "D Month, YYYY" with an unpadded day.
pub fn render_date(date: NaiveDate) -> String {
    format!(
        "{} {}, {}",
        date.day(),
        MONTHS[date.month0() as usize],
        date.year()
    )
}

static RENDERED_DATE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^(\d{1,2})\s+([A-Za-z]+\.?),?\s+(\d{4})$").unwrap());

/// Inverse of [`render_date`]; also accepts abbreviated month names.
pub fn parse_rendered_date(s: &str) -> Option<NaiveDate> {
    let caps = RENDERED_DATE.captures(s.trim())?;
    let day: u32 = caps[1].parse().ok()?;
    let month = month_from_name(&caps[2])?;
    let year: i32 = caps[3].parse().ok()?;
    NaiveDate::from_ymd_opt(year, month, day)
}

static CLOCK_ON_DATE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)^(\d{1,2}):(\d{2})\s*(am|pm)\s+on\s+(\d{1,2})\s+([a-z]+\.?),?\s+(\d{4})$")
        .unwrap()
});
static SLASHED: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^(\d{4})/(\d{1,2})/(\d{1,2})(?:\s*\([A-Za-z]+\))?(?:\s+(\d{1,2}):(\d{2}))?$")
        .unwrap()
});

/// Parses the timestamp renderings found in the supported corpora.
///
/// Accepted: `2:33 pm on 5 February, 2023`, `2023/05/20 (Sat) 02:21`,
/// `5 February, 2023`, and ISO-8601 dates or datetimes.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    if let Some(c) = CLOCK_ON_DATE.captures(s) {
        let mut hour: u32 = c[1].parse().ok()?;
        let minute: u32 = c[2].parse().ok()?;
        if !(1..=12).contains(&hour) {
            return None;
        }
        let pm = c[3].eq_ignore_ascii_case("pm");
        hour = match (hour, pm) {
            (12, false) => 0,
            (12, true) => 12,
            (h, true) => h + 12,
            (h, false) => h,
        };
        let date = NaiveDate::from_ymd_opt(
            c[6].parse().ok()?,
            month_from_name(&c[5])?,
            c[4].parse().ok()?,
        )?;
        return Some(date.and_time(NaiveTime::from_hms_opt(hour, minute, 0)?));
    }
    if let Some(c) = SLASHED.captures(s) {
        let date =
            NaiveDate::from_ymd_opt(c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?)?;
        let time = match (c.get(4), c.get(5)) {
            (Some(h), Some(m)) => {
                NaiveTime::from_hms_opt(h.as_str().parse().ok()?, m.as_str().parse().ok()?, 0)?
            }
            _ => NaiveTime::MIN,
        };
        return Some(date.and_time(time));
    }
    if let Some(date) = parse_rendered_date(s) {
        return Some(date.and_time(NaiveTime::MIN));
    }
    if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(dt);
    }
    if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Some(dt);
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_time(NaiveTime::MIN))
}

fn parse_count(word: &str) -> Option<u32> {
    match word {
        "a" | "an" => Some(1),
        "couple" => Some(2),
        _ => word
            .parse()
            .ok()
            .or_else(|| NUMBER_WORDS.iter().position(|w| *w == word).map(|n| n as u32)),
    }
}

fn parse_weekday(word: &str) -> Option<Weekday> {
    match word {
        "monday" => Some(Weekday::Mon),
        "tuesday" => Some(Weekday::Tue),
        "wednesday" => Some(Weekday::Wed),
        "thursday" => Some(Weekday::Thu),
        "friday" => Some(Weekday::Fri),
        "saturday" => Some(Weekday::Sat),
        "sunday" => Some(Weekday::Sun),
        _ => None,
    }
}

#[derive(Clone, Copy)]
enum Unit {
    Day,
    Week,
    Month,
    Year,
}

fn parse_unit(word: &str) -> Option<Unit> {
    match word.trim_end_matches('s') {
        "day" => Some(Unit::Day),
        "week" => Some(Unit::Week),
        "month" => Some(Unit::Month),
        "year" => Some(Unit::Year),
        _ => None,
    }
}

/// Shifts by whole calendar units. Months and years clamp to the target month's length.
fn shift(date: NaiveDate, unit: Unit, amount: i64) -> Option<NaiveDate> {
    match unit {
        Unit::Day => date.checked_add_signed(Duration::days(amount)),
        Unit::Week => date.checked_add_signed(Duration::days(amount * 7)),
        Unit::Month | Unit::Year => {
            let months = if matches!(unit, Unit::Year) {
                amount * 12
            } else {
                amount
            };
            let m = Months::new(u32::try_from(months.unsigned_abs()).ok()?);
            if months >= 0 {
                date.checked_add_months(m)
            } else {
                date.checked_sub_months(m)
            }
        }
    }
}

fn weekday_offset(date: NaiveDate, target: Weekday, direction: &str) -> Option<i64> {
    let today = date.weekday().num_days_from_monday() as i64;
    let want = target.num_days_from_monday() as i64;
    match direction {
        // Most recent occurrence strictly before the anchor.
        "last" => {
            let back = (today - want).rem_euclid(7);
            Some(if back == 0 { -7 } else { -back })
        }
        // First occurrence strictly after the anchor.
        "next" => {
            let ahead = (want - today).rem_euclid(7);
            Some(if ahead == 0 { 7 } else { ahead })
        }
        // Same Monday-to-Sunday week as the anchor.
        "this" => Some(want - today),
        _ => None,
    }
}

fn unit_or_weekday(date: NaiveDate, word: &str, direction: &str) -> Option<NaiveDate> {
    if let Some(unit) = parse_unit(word) {
        return shift(date, unit, if direction == "last" { -1 } else { 1 });
    }
    let offset = weekday_offset(date, parse_weekday(word)?, direction)?;
    date.checked_add_signed(Duration::days(offset))
}

fn normalize_phrase(phrase: &str) -> Vec<String> {
    phrase
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn resolve_offset(date: NaiveDate, words: &[&str]) -> Option<NaiveDate> {
    let day = |n: i64| date.checked_add_signed(Duration::days(n));
    match words {
        ["today"] | ["tonight"] | ["this", "morning" | "afternoon" | "evening"] => Some(date),
        ["yesterday"] | ["last", "night"] => day(-1),
        ["tomorrow"] => day(1),
        ["the", "day", "before", "yesterday"] | ["day", "before", "yesterday"] => day(-2),
        ["the", "day", "after", "tomorrow"] | ["day", "after", "tomorrow"] => day(2),
        ["last", "weekend"] => {
            let monday = date.weekday().num_days_from_monday() as i64;
            day(-monday - 2)
        }
        ["next", "weekend"] => {
            let monday = date.weekday().num_days_from_monday() as i64;
            day(7 - monday + 5)
        }
        ["last" | "past" | "previous", word] => unit_or_weekday(date, word, "last"),
        ["next" | "coming", word] => unit_or_weekday(date, word, "next"),
        ["this", weekday] => day(weekday_offset(date, parse_weekday(weekday)?, "this")?),
        [count, unit, "ago" | "earlier" | "before"] => {
            shift(date, parse_unit(unit)?, -(parse_count(count)? as i64))
        }
        ["a", "couple", "of", unit, "ago"] | ["a", "couple", unit, "ago"] => {
            shift(date, parse_unit(unit)?, -2)
        }
        ["in", count, unit] | [count, unit, "later" | "after"] => {
            shift(date, parse_unit(unit)?, parse_count(count)? as i64)
        }
        [count, unit, "from", "now"] => {
            shift(date, parse_unit(unit)?, parse_count(count)? as i64)
        }
        _ => None,
    }
}

/// Resolves a relative phrase ("two days ago", "last Friday") against the session date.
///
/// Matching is case-insensitive and number words are understood up to twenty.
/// Phrases outside the supported grammar return [`Resolution::Unresolvable`].
pub fn resolve_relative(session_date: NaiveDate, phrase: &str) -> Resolution {
    let words = normalize_phrase(phrase);
    let mut refs: Vec<&str> = words.iter().map(String::as_str).collect();
    if refs.first() == Some(&"on") {
        refs.remove(0);
    }
    match resolve_offset(session_date, &refs) {
        Some(date) => Resolution::Resolved(ResolvedDate {
            date,
            rendering: render_date(date),
            source_phrase: phrase.to_string(),
        }),
        None => Resolution::Unresolvable,
    }
}

/// Finds the first relative time phrase in free text, preferring longer matches.
pub fn find_relative_phrase(text: &str, session_date: NaiveDate) -> Option<ResolvedDate> {
    let words: Vec<&str> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect();
    for start in 0..words.len() {
        for len in (1..=5).rev() {
            let Some(window) = words.get(start..start + len) else {
                continue;
            };
            if window.iter().any(|w| w.is_empty()) || window[0].eq_ignore_ascii_case("on") {
                continue;
            }
            let phrase = window.join(" ").to_lowercase();
            if let Resolution::Resolved(r) = resolve_relative(session_date, &phrase) {
                return Some(r);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingIssue {
    pub stated: String,
    pub phrase: String,
    pub expected: String,
}

static GROUNDED_CLAUSE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)\bon\s+(\d{1,2}\s+[A-Za-z]+\.?,?\s+\d{4})\s*\(context:\s*([^)]+)\)").unwrap()
});

/// Checks "On <date> (context: <phrase>)" clauses against the session date.
///
/// Clauses whose phrase cannot be resolved are not checked.
pub fn check_grounding(text: &str, session_date: NaiveDate) -> Vec<GroundingIssue> {
    let mut issues = Vec::new();
    for caps in GROUNDED_CLAUSE.captures_iter(text) {
        let stated = caps[1].to_string();
        let phrase = caps[2].trim().to_string();
        let Resolution::Resolved(expected) = resolve_relative(session_date, &phrase) else {
            continue;
        };
        if parse_rendered_date(&stated) != Some(expected.date) {
            issues.push(GroundingIssue {
                stated,
                phrase,
                expected: expected.rendering,
            });
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn resolved(date: NaiveDate, phrase: &str) -> NaiveDate {
        resolve_relative(date, phrase)
            .date()
            .unwrap_or_else(|| panic!("{phrase:?} did not resolve"))
    }

    #[test]
    fn manager_prompt_anchor_case() {
        let r = resolve_relative(d(2026, 2, 25), "two days ago");
        let Resolution::Resolved(r) = r else {
            panic!("unresolved")
        };
        assert_eq!(r.date, d(2026, 2, 23));
        assert_eq!(r.rendering, "23 February, 2026");
        assert_eq!(r.source_phrase, "two days ago");
    }

    #[test]
    fn simple_day_words() {
        assert_eq!(resolved(d(2023, 2, 5), "today"), d(2023, 2, 5));
        assert_eq!(resolved(d(2023, 3, 1), "yesterday"), d(2023, 2, 28));
        assert_eq!(resolved(d(2024, 3, 1), "Yesterday"), d(2024, 2, 29));
        assert_eq!(resolved(d(2023, 12, 31), "tomorrow"), d(2024, 1, 1));
        assert_eq!(resolved(d(2023, 3, 1), "the day before yesterday"), d(2023, 2, 27));
    }

    #[test]
    fn counted_units() {
        let base = d(2023, 5, 8);
        assert_eq!(resolved(base, "3 weeks ago"), d(2023, 4, 17));
        assert_eq!(resolved(base, "twenty days ago"), d(2023, 4, 18));
        assert_eq!(resolved(base, "a week ago"), d(2023, 5, 1));
        assert_eq!(resolved(base, "in two weeks"), d(2023, 5, 22));
        assert_eq!(resolved(base, "two years ago"), d(2021, 5, 8));
        assert_eq!(resolved(base, "a couple of days ago"), d(2023, 5, 6));
    }

    #[test]
    fn last_month_clamps_to_month_length() {
        assert_eq!(resolved(d(2023, 3, 31), "last month"), d(2023, 2, 28));
        assert_eq!(resolved(d(2024, 3, 31), "last month"), d(2024, 2, 29));
        assert_eq!(resolved(d(2024, 2, 29), "last year"), d(2023, 2, 28));
        assert_eq!(resolved(d(2023, 1, 31), "next month"), d(2023, 2, 28));
        assert_eq!(resolved(d(2023, 1, 15), "last week"), d(2023, 1, 8));
    }

    #[test]
    fn weekday_references() {
        // 2023-05-10 is a Wednesday.
        let wed = d(2023, 5, 10);
        assert_eq!(resolved(wed, "last Friday"), d(2023, 5, 5));
        assert_eq!(resolved(wed, "last Wednesday"), d(2023, 5, 3));
        assert_eq!(resolved(wed, "last Tuesday"), d(2023, 5, 9));
        assert_eq!(resolved(wed, "next Friday"), d(2023, 5, 12));
        assert_eq!(resolved(wed, "next Wednesday"), d(2023, 5, 17));
        assert_eq!(resolved(wed, "this Monday"), d(2023, 5, 8));
        assert_eq!(resolved(wed, "last weekend"), d(2023, 5, 6));
    }

    #[test]
    fn unsupported_phrases_are_unresolvable() {
        let base = d(2023, 5, 8);
        for p in ["soon", "a while back", "when I was young", "last blorp", "many days ago"] {
            assert_eq!(resolve_relative(base, p), Resolution::Unresolvable, "{p}");
        }
    }

    #[test]
    fn rendering() {
        assert_eq!(render_date(d(2023, 2, 5)), "5 February, 2023");
        assert_eq!(render_date(d(2026, 2, 23)), "23 February, 2026");
        assert_eq!(render_date(d(2024, 12, 1)), "1 December, 2024");
        assert_eq!(parse_rendered_date("1 December, 2024"), Some(d(2024, 12, 1)));
        assert_eq!(parse_rendered_date("5 Feb 2023"), Some(d(2023, 2, 5)));
        assert_eq!(parse_rendered_date("31 February, 2023"), None);
    }

    #[test]
    fn corpus_timestamp_formats() {
        let t = parse_timestamp("2:33 pm on 5 February, 2023").unwrap();
        assert_eq!(t.to_string(), "2023-02-05 14:33:00");
        let t = parse_timestamp("12:05 am on 1 January, 2024").unwrap();
        assert_eq!(t.to_string(), "2024-01-01 00:05:00");
        let t = parse_timestamp("2023/05/20 (Sat) 02:21").unwrap();
        assert_eq!(t.to_string(), "2023-05-20 02:21:00");
        assert!(parse_timestamp("2023-02-05").is_some());
        assert!(parse_timestamp("13:00 pm on 5 February, 2023").is_none());
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn grounding_check_flags_wrong_dates() {
        let date = d(2026, 2, 25);
        let ok = "On 23 February, 2026 (context: two days ago), John bought a car.";
        assert!(check_grounding(ok, date).is_empty());
        let bad = "On 22 February, 2026 (context: two days ago), John bought a car.";
        let issues = check_grounding(bad, date);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].expected, "23 February, 2026");
        let vague = "On 1 January, 2026 (context: a while back), John moved.";
        assert!(check_grounding(vague, date).is_empty());
    }

    #[test]
    fn finds_phrases_in_sentences() {
        let date = d(2026, 2, 25);
        let r = find_relative_phrase("I bought a car two days ago, finally!", date).unwrap();
        assert_eq!((r.source_phrase.as_str(), r.rendering.as_str()), ("two days ago", "23 February, 2026"));
        let r = find_relative_phrase("We met last Friday at the park.", date).unwrap();
        assert_eq!(r.source_phrase, "last friday");
        assert!(find_relative_phrase("I like hiking in the mountains.", date).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dates() -> impl Strategy<Value = NaiveDate> {
            (1900i32..2100, 1u32..=366).prop_map(|(y, ord)| {
                NaiveDate::from_yo_opt(y, ord).unwrap_or_else(|| NaiveDate::from_yo_opt(y, 365).unwrap())
            })
        }

        proptest! {
            #[test]
            fn days_ago_and_in_days_are_inverse(date in dates(), n in 1u32..=20) {
                let back = resolved(date, &format!("{n} days ago"));
                prop_assert_eq!(resolved(back, &format!("in {n} days")), date);
            }

            #[test]
            fn weekdays_land_within_a_week(date in dates(), w in 0usize..7) {
                let name = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"][w];
                let last = resolved(date, &format!("last {name}"));
                let next = resolved(date, &format!("next {name}"));
                prop_assert!((1..=7).contains(&(date - last).num_days()));
                prop_assert!((1..=7).contains(&(next - date).num_days()));
                prop_assert_eq!(last.weekday().num_days_from_monday() as usize, w);
            }

            #[test]
            fn rendering_parses_back(date in dates()) {
                prop_assert_eq!(parse_rendered_date(&render_date(date)), Some(date));
            }
        }
    }
}

/// Lowercases, maps every character outside `[a-z0-9-]` to a space and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn main() { std::process::exit(highdan::cli::run()) }

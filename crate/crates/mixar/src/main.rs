fn main() {
    std::process::exit(mixar::cli::run());
}

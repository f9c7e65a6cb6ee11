fn main() {
    std::process::exit(prompt_evolve::cli::run());
}

fn main() {
    std::process::exit(css_distill_cli::run(std::env::args_os()));
}

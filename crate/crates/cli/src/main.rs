fn main() {
    std::process::exit(erasing_cli::app::run(std::env::args_os()));
}

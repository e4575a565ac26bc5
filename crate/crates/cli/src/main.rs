fn main() {
    std::process::exit(drivecoach_cli::run(std::env::args_os()));
}

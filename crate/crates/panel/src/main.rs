fn main() {
    std::process::exit(fmea_panel::cli::main_entry());
}

from iboot.cli import main

raise SystemExit(main())
